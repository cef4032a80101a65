import configparser
import logging
import os

from dataclasses import dataclass
from delta import CONFIG_FILE, DEFAULT_TIMEOUT_S, SOLVER_ENV_VAR

logger = logging.getLogger(__name__)


@dataclass
class Config:
    solver_cmd: str = ""
    timeout_s: float = DEFAULT_TIMEOUT_S
    t_up_factor: float = 2.0
    anchor_widening: int = 1
    k_headroom: float = 0.10
    population: int = 64
    generations: int = 400
    elite: int = 2
    tournament: int = 4
    crossover_rate: float = 0.9
    mutation_rate: float = 0.1
    stagnation: int = 200
    seed_baselines: bool = True
    workers: int = 1
    output_dir: str = "delta_runs"
    log_level: str = "INFO"
    source_file: str = ""


# (section, option, Config attribute, converter)
_OPTIONS = [
    ("solver", "command", "solver_cmd", str),
    ("solver", "timeout_s", "timeout_s", float),
    ("pruning", "t_up_factor", "t_up_factor", float),
    ("pruning", "anchor_widening", "anchor_widening", int),
    ("pruning", "k_headroom", "k_headroom", float),
    ("ga", "population", "population", int),
    ("ga", "generations", "generations", int),
    ("ga", "elite", "elite", int),
    ("ga", "tournament", "tournament", int),
    ("ga", "crossover_rate", "crossover_rate", float),
    ("ga", "mutation_rate", "mutation_rate", float),
    ("ga", "stagnation", "stagnation", int),
    ("ga", "seed_baselines", "seed_baselines", bool),
    ("experiment", "workers", "workers", int),
    ("experiment", "output_dir", "output_dir", str),
    ("experiment", "log_level", "log_level", str),
]


def create_default_config(config_file: str | None = None) -> str:
    """Create a default configuration file"""
    config_file = config_file or CONFIG_FILE
    # Ensure we don't accidentally overwrite config
    if os.path.isfile(config_file):
        raise FileExistsError(f"Config file '{config_file}' already exists!")
    config = configparser.ConfigParser(allow_no_value=True)
    # keep comment case
    config.optionxform = str  # type: ignore
    config["solver"] = {
        "# command template; placeholders {lp} {sol} {timeout} {start}": None,
        f"# {SOLVER_ENV_VAR} in the environment overrides this": None,
        "# e.g. highs --model_file {lp} --solution_file {sol}": None,
        "command": "",
        "timeout_s": str(DEFAULT_TIMEOUT_S),
    }
    config["pruning"] = {
        "# horizon upper bound as a multiple of the full-port makespan": None,
        "t_up_factor": "2.0",
        "# intervals added either side of every anchor": None,
        "anchor_widening": "1",
        "k_headroom": "0.10",
    }
    config["ga"] = {
        "population": "64",
        "generations": "400",
        "elite": "2",
        "tournament": "4",
        "crossover_rate": "0.9",
        "mutation_rate": "0.1",
        "stagnation": "200",
        "seed_baselines": "yes",
    }
    config["experiment"] = {
        "workers": "1",
        "output_dir": "delta_runs",
        "log_level": "INFO",
    }
    config_path: str = os.path.dirname(config_file)
    if config_path and not os.path.exists(config_path):  # pragma: no cover
        os.makedirs(config_path)
    with open(config_file, "w") as config_file_handle:
        config.write(config_file_handle)

    return config_file


def load_config(config_file=None) -> Config:
    """Load and validate configuration options."""
    config_file = config_file or CONFIG_FILE
    if not os.path.isfile(config_file):
        config_file = create_default_config(config_file)
    config = Config()
    parser = configparser.ConfigParser()
    parser.read(config_file)
    for section, option, attr, convert in _OPTIONS:
        if not parser.has_option(section, option):
            continue
        try:
            if convert is bool:
                value = parser.getboolean(section, option)
            else:
                value = convert(parser.get(section, option))
        except ValueError as err:
            logger.warning(f"Skipped [{section}] {option} in {config_file}: {err}")
            continue
        setattr(config, attr, value)

    for attr, low, high in [
        ("crossover_rate", 0.0, 1.0),
        ("mutation_rate", 0.0, 1.0),
        ("k_headroom", 0.0, float("inf")),
    ]:
        if not low <= getattr(config, attr) <= high:
            logger.warning(f"{attr} out of range in {config_file}, using default")
            setattr(config, attr, getattr(Config, attr))
    if config.population < 2:
        logger.warning(f"population < 2 in {config_file}, using default")
        config.population = Config.population
    if config.workers < 1:
        config.workers = 1

    env_cmd = os.environ.get(SOLVER_ENV_VAR)
    if env_cmd:
        config.solver_cmd = env_cmd
    config.source_file = config_file

    return config
