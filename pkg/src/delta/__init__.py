import os

__version__ = "0.1.0"

CONFIG_FILE: str = os.path.join(os.path.expanduser("~"), ".delta", "delta.cfg")
SOLVER_ENV_VAR: str = "DELTA_SOLVER_CMD"

# Gb/s per GPU NIC, the inter-pod setting used throughout the evaluation
DEFAULT_BANDWIDTH: float = 400.0
DEFAULT_TIMEOUT_S: float = 600.0
BASE_SEQ_LEN: int = 4096

ALGORITHMS: tuple[str, ...] = ("prop", "sqrt", "iterhalve", "fast", "topo", "joint")
BASELINE_ALGORITHMS: tuple[str, ...] = ("prop", "sqrt", "iterhalve")
MILP_ALGORITHMS: tuple[str, ...] = ("topo", "joint")

REPORT_COL_WIDTHS = [22, 10, 10, 8, 10, 12, 8, 10]
