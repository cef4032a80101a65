"""
File-based bridge to external MILP solvers.

Models go out in CPLEX LP format; the solver runs as a subprocess from a
command template and its solution file comes back in one of two dialects:
CBC's ``-solu`` listing or the ``name value`` style written by HiGHS and
Gurobi.
"""

import logging
import os
import re
import shlex
import shutil
import subprocess
import tempfile
import time

from typing import Mapping, Optional

from delta import SOLVER_ENV_VAR
from delta.errors import (
    ModelError,
    SolutionParseError,
    SolverError,
    SolverUnavailableError,
)
from delta.milp import MilpModel, Sense, Solution, SolveStatus, VarKind

logger = logging.getLogger(__name__)

SOLVER_TEMPLATES = {
    "highs": "highs --model_file {lp} --solution_file {sol} --time_limit {timeout}",
    "cbc": "cbc {lp} sec {timeout} solve solu {sol}",
}
START_TEMPLATES = {
    "highs": (
        "highs --model_file {lp} --solution_file {sol} --time_limit {timeout}"
        " --read_solution_file {start}"
    ),
    "cbc": "cbc {lp} mips {start} sec {timeout} solve solu {sol}",
}
# seconds on top of the solver's own limit before the process is killed
KILL_GRACE_S = 30.0
LINE_WIDTH = 100
VALID_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_.]*$")

CBC_STATUS = {
    "optimal": SolveStatus.OPTIMAL,
    "infeasible": SolveStatus.INFEASIBLE,
    "integer infeasible": SolveStatus.INFEASIBLE,
    "unbounded": SolveStatus.ERROR,
}
SOL_STATUS = {
    "optimal": SolveStatus.OPTIMAL,
    "infeasible": SolveStatus.INFEASIBLE,
    "unbounded": SolveStatus.ERROR,
    "primal infeasible or unbounded": SolveStatus.INFEASIBLE,
    "time limit reached": SolveStatus.TIMEOUT,
}
CAP_SLACK = 1e-6


####################
# PUBLIC FUNCTIONS #
####################
def emit_lp(model: MilpModel) -> str:
    """CPLEX LP text for a model; identical input gives identical bytes."""
    for name in list(model.variables) + list(model.constraints):
        if not VALID_NAME.match(name) or len(name) > 255:
            raise ModelError(f"'{name}' is not a valid LP identifier")
    if "obj" in model.constraints:
        raise ModelError("constraint name 'obj' collides with the objective row")

    lines = [f"\\ Problem name: {model.name}", ""]
    lines.append("Minimize" if model.minimize else "Maximize")
    lines.extend(_wrap(" obj:", _linear(model.objective.items())))
    lines.append("Subject To")
    for constraint in model.constraints.values():
        body = _linear(constraint.terms)
        body += [constraint.sense.value, _num(constraint.rhs)]
        lines.extend(_wrap(f" {constraint.name}:", body))
    lines.append("Bounds")
    general, binary = [], []
    for var in model.variables.values():
        if var.kind == VarKind.BINARY:
            binary.append(var.name)
            continue
        if var.kind == VarKind.INTEGER:
            general.append(var.name)
        if var.upper is not None and var.upper == var.lower:
            lines.append(f" {var.name} = {_num(var.lower)}")
        elif var.upper is None:
            lines.append(f" {var.name} >= {_num(var.lower)}")
        else:
            lines.append(f" {_num(var.lower)} <= {var.name} <= {_num(var.upper)}")
    lines.append("General")
    lines.extend(_wrap("", general))
    lines.append("Binary")
    lines.extend(_wrap("", binary))
    lines.append("End")
    return "\n".join(lines) + "\n"


def default_solver_cmd() -> Optional[str]:
    """Solver template from the environment, else the first solver on PATH."""
    from_env = os.environ.get(SOLVER_ENV_VAR)
    if from_env:
        return from_env
    for executable, template in SOLVER_TEMPLATES.items():
        if shutil.which(executable):
            return template
    return None


def start_template(solver_cmd: str) -> str:
    """Variant of a stock solver template that also reads a start file."""
    for executable, template in SOLVER_TEMPLATES.items():
        if solver_cmd == template:
            return START_TEMPLATES[executable]
    return solver_cmd


def solver_available(solver_cmd: Optional[str]) -> bool:
    if not solver_cmd:
        return False
    return shutil.which(shlex.split(solver_cmd)[0]) is not None


def solve(
    model: MilpModel,
    solver_cmd: Optional[str],
    timeout_s: float,
    start: Optional[Mapping[str, float]] = None,
    keep_dir: Optional[str] = None,
) -> Solution:
    """Write the model, run the solver and read its answer back.

    ``solver_cmd`` is a template with ``{lp}``, ``{sol}``, ``{timeout}`` and
    optionally ``{start}`` placeholders. A timeout of zero or less returns
    TIMEOUT without starting the solver.
    """
    if not solver_cmd:
        raise SolverUnavailableError(
            f"no solver command configured; set {SOLVER_ENV_VAR} or [solver] command"
        )
    executable = shlex.split(solver_cmd)[0]
    if shutil.which(executable) is None:
        raise SolverUnavailableError(f"solver '{executable}' was not found on PATH")
    if timeout_s <= 0:
        return Solution(SolveStatus.TIMEOUT)

    dialect = "cbc" if os.path.basename(executable).startswith("cbc") else "sol"
    workdir = keep_dir or tempfile.mkdtemp(prefix="delta_")
    os.makedirs(workdir, exist_ok=True)
    lp_path = os.path.join(workdir, f"{model.name}.lp")
    sol_path = os.path.join(workdir, f"{model.name}.sol")
    start_path = os.path.join(workdir, f"{model.name}.start")
    with open(lp_path, "w") as lp_file:
        lp_file.write(emit_lp(model))
    if os.path.exists(sol_path):
        os.remove(sol_path)

    if start is not None:
        solver_cmd = start_template(solver_cmd)
        if "{start}" in solver_cmd:
            write_start(start, start_path, dialect)
        else:
            logger.warning(
                "solver command has no {start} placeholder; hot start ignored"
            )
    command = _fill_template(solver_cmd, lp_path, sol_path, timeout_s, start_path)

    logger.info(
        f"running {executable} on {model.name} ({len(model.variables)} variables)"
    )
    began = time.perf_counter()
    try:
        result = subprocess.run(
            shlex.split(command),
            capture_output=True,
            text=True,
            timeout=timeout_s + KILL_GRACE_S,
            cwd=workdir,
        )
        raw_output = result.stdout + result.stderr
    except subprocess.TimeoutExpired as err:
        raw_output = _as_text(err.stdout) + _as_text(err.stderr)
        logger.warning(f"{executable} ignored its time limit and was stopped")
    except OSError as err:
        raise SolverUnavailableError(f"could not start '{executable}': {err}") from err
    elapsed = time.perf_counter() - began

    if not os.path.exists(sol_path):
        raise SolutionParseError(f"{executable} wrote no solution file", raw_output)
    with open(sol_path) as sol_file:
        text = sol_file.read()
    solution = parse_solution(text, dialect, raw_output)
    solution.solve_time_s = elapsed
    if keep_dir is None:
        shutil.rmtree(workdir, ignore_errors=True)
    return solution


def parse_solution(text: str, dialect: str, raw_output: str = "") -> Solution:
    if dialect == "cbc":
        return _parse_cbc(text, raw_output)
    if dialect == "sol":
        return _parse_sol(text, raw_output)
    raise SolutionParseError(f"unknown solution dialect '{dialect}'", raw_output)


def write_start(values: Mapping[str, float], path: str, dialect: str = "sol") -> str:
    """Write an assignment as a start file the solver can read back."""
    with open(path, "w") as start_file:
        if dialect == "cbc":
            start_file.write("Stopped on iterations - objective value 0\n")
            for index, (name, value) in enumerate(values.items()):
                start_file.write(f"{index:>7} {name} {value:>15.12g} {0:>23}\n")
        else:
            start_file.write("Model status\nUnknown\n\n# Primal solution values\n")
            start_file.write(f"Feasible\nObjective 0\n# Columns {len(values)}\n")
            for name, value in values.items():
                start_file.write(f"{name} {value:.12g}\n")
            start_file.write("# Rows 0\n")
    return path


def lexicographic_minimize_ports(
    model: MilpModel,
    stage1: Solution,
    solver_cmd: Optional[str],
    timeout_s: float,
    keep_dir: Optional[str] = None,
) -> Solution:
    """Fewest circuits that keep the makespan at the stage-one optimum."""
    if stage1.objective is None or not stage1.has_values:
        raise SolverError(
            f"stage one returned no usable makespan ({stage1.status.value})"
        )
    non_optimal = stage1.status != SolveStatus.OPTIMAL
    if non_optimal:
        logger.warning(
            "stage one did not prove optimality; minimizing ports under its incumbent"
        )
    c_star = float(stage1.objective)
    second = model.copy()
    second.name = f"{model.name}_ports"
    cap = c_star * (1 + CAP_SLACK)
    second.add_constraint("makespan_cap", (), {"C": 1.0}, Sense.LE, cap)
    second.set_objective({name: 1.0 for name in second.x_names()})
    solution = solve(
        second, solver_cmd, timeout_s, start=stage1.values, keep_dir=keep_dir
    )
    solution.non_optimal_baseline = non_optimal
    return solution


#####################
# PRIVATE FUNCTIONS #
#####################
def _num(value: float) -> str:
    return f"{value:.12g}"


def _linear(terms) -> list[str]:
    tokens: list[str] = []
    for var, coef in terms:
        if coef == 0:
            continue
        sign = "-" if coef < 0 else "+"
        magnitude = abs(coef)
        term = var if magnitude == 1 else f"{_num(magnitude)} {var}"
        if not tokens:
            tokens.append(f"-{term}" if coef < 0 else term)
        else:
            tokens.append(f"{sign} {term}")
    return tokens


def _wrap(head: str, tokens: list[str]) -> list[str]:
    """Join tokens after a head, breaking lines that grow too long."""
    if not tokens:
        return [head] if head else []
    lines, current = [], head
    for token in tokens:
        if current.strip() and len(current) + len(token) + 1 > LINE_WIDTH:
            lines.append(current)
            current = "  " + token
        else:
            current = f"{current} {token}" if current else f" {token}"
    lines.append(current)
    return lines


def _fill_template(
    template: str, lp: str, sol: str, timeout_s: float, start: str
) -> str:
    try:
        return template.format(
            lp=shlex.quote(lp),
            sol=shlex.quote(sol),
            timeout=f"{timeout_s:g}",
            start=shlex.quote(start),
        )
    except (KeyError, IndexError) as err:
        raise SolverUnavailableError(f"bad solver command template: {err}") from err


def _as_text(stream) -> str:
    if stream is None:
        return ""
    return stream.decode(errors="replace") if isinstance(stream, bytes) else stream


def _parse_cbc(text: str, raw_output: str) -> Solution:
    lines = text.splitlines()
    if not lines:
        raise SolutionParseError("empty CBC solution file", raw_output)
    header = lines[0].strip()
    lowered = header.lower()
    objective = None
    match = re.search(r"objective value\s+(\S+)", header)
    if match:
        try:
            objective = float(match.group(1))
        except ValueError as err:
            message = f"bad objective in '{header}'"
            raise SolutionParseError(message, raw_output) from err

    values: dict[str, float] = {}
    for line in lines[1:]:
        parts = line.replace("**", " ").split()
        if not parts:
            continue
        message = f"unreadable CBC line '{line}'"
        if len(parts) < 3:
            raise SolutionParseError(message, raw_output)
        try:
            values[parts[1]] = float(parts[2])
        except ValueError as err:
            raise SolutionParseError(message, raw_output) from err

    status = None
    for prefix, mapped in CBC_STATUS.items():
        if lowered.startswith(prefix):
            status = mapped
            break
    if status is None:
        if lowered.startswith("stopped") or lowered.startswith("time limit"):
            status = SolveStatus.FEASIBLE if values else SolveStatus.TIMEOUT
        else:
            raise SolutionParseError(f"unknown CBC status '{header}'", raw_output)
    if status == SolveStatus.INFEASIBLE:
        return Solution(status, raw_output=raw_output)
    return Solution(status, objective, values, raw_output=raw_output)


def _parse_sol(text: str, raw_output: str) -> Solution:
    lines = [line.strip() for line in text.splitlines()]
    status_text = None
    objective = None
    primal = None
    values: dict[str, float] = {}
    index = 0
    while index < len(lines):
        line = lines[index]
        if line == "Model status" and index + 1 < len(lines):
            status_text = lines[index + 1].lower()
            index += 2
            continue
        if line == "# Primal solution values" and index + 1 < len(lines):
            primal = lines[index + 1].lower()
            index += 2
            continue
        if line.startswith("# Objective value"):
            objective = _float_after(line.split("=")[-1], raw_output)
        elif line.startswith("Objective "):
            objective = _float_after(line.split()[-1], raw_output)
        elif line.startswith("# Columns"):
            count = int(line.split()[-1])
            for row in lines[index + 1 : index + 1 + count]:
                parts = row.split()
                if len(parts) < 2:
                    raise SolutionParseError(
                        f"unreadable column line '{row}'", raw_output
                    )
                values[parts[0]] = _float_after(parts[1], raw_output)
            index += count + 1
            continue
        elif line.startswith("# Rows"):
            break
        elif status_text is None and primal is None and line[:1] not in ("", "#"):
            # Gurobi-style files are bare 'name value' lines after the comments
            parts = line.split()
            if len(parts) == 2:
                values[parts[0]] = _float_after(parts[1], raw_output)
        index += 1

    if status_text is None:
        if not values:
            raise SolutionParseError(
                "solution file holds no status and no values", raw_output
            )
        return Solution(SolveStatus.OPTIMAL, objective, values, raw_output=raw_output)
    status = SOL_STATUS.get(status_text)
    if status is None:
        feasible = values and primal == "feasible"
        status = SolveStatus.FEASIBLE if feasible else SolveStatus.ERROR
    if status == SolveStatus.TIMEOUT and values and primal == "feasible":
        status = SolveStatus.FEASIBLE
    if status in (SolveStatus.INFEASIBLE, SolveStatus.ERROR) or primal == "none":
        return Solution(status, raw_output=raw_output)
    return Solution(status, objective, values, raw_output=raw_output)


def _float_after(token: str, raw_output: str) -> float:
    try:
        return float(token)
    except ValueError as err:
        raise SolutionParseError(f"'{token}' is not a number", raw_output) from err
