import json
import logging
import math
import os

import pandas as pd
from colorama import Fore, Style

from delta.errors import ConfigError

LEVEL_COLORS = {
    logging.DEBUG: Style.DIM,
    logging.INFO: Fore.BLUE,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Style.BRIGHT + Fore.RED,
}


class ColorFormatter(logging.Formatter):
    """Prefix each record with its level name in color."""

    def format(self, record: logging.LogRecord) -> str:
        color = LEVEL_COLORS.get(record.levelno, "")
        message = super().format(record)
        return f"{color}{record.levelname:<8}{Style.RESET_ALL}{message}"


def setup_logging(level: str | int = "INFO") -> logging.Logger:
    """Attach a single colored console handler to the package logger."""
    logger = logging.getLogger("delta")
    logger.setLevel(level if isinstance(level, int) else level.upper())
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(ColorFormatter("%(name)s: %(message)s"))
    logger.addHandler(handler)
    logger.propagate = False
    return logger


def show_summary(summary: dict, command: str) -> None:
    """Print one command's results as aligned ``key  value`` lines."""
    print(f"{Style.BRIGHT}{command}{Style.NORMAL}")
    width = max((len(str(key)) for key in summary), default=0)
    for key, value in summary.items():
        if isinstance(value, float):
            value = f"{value:.6g}"
        print(f"  {Fore.BLUE}{str(key):<{width}}{Fore.RESET}  {value}")


def disp_table(table: pd.DataFrame, title: str, widths: list[int] | None = None):
    """Print a report table with a bright header row."""
    print(f"{Style.BRIGHT}{title}{Style.NORMAL}")
    if table.empty:
        print("No rows.")
        return
    widths = widths or [max(len(str(c)), 10) + 2 for c in table.columns]
    header = "".join(
        "{:{}}".format(str(col), widths[i % len(widths)])
        for i, col in enumerate(table.columns)
    )
    print(Style.BRIGHT + header + Style.NORMAL)
    for row in table.itertuples(index=False):
        cells = []
        for i, value in enumerate(row):
            wd = widths[i % len(widths)]
            if isinstance(value, float):
                cells.append("{:<{}.4f}".format(value, wd))
            else:
                cells.append("{:{}}".format(str(value), wd))
        print("".join(cells))


def is_finite_number(item: str | int | float) -> bool:
    """True when the item reads as a finite number, as bandwidths must."""
    if not isinstance(item, (str, int, float)):
        raise TypeError(f"cannot read a number from {type(item).__name__}")
    try:
        return math.isfinite(float(item))
    except ValueError:
        return False


def parse_float_list(text: str) -> list[float]:
    """Parse '400,800, 1600' into floats."""
    items = [item.strip() for item in text.split(",") if item.strip()]
    bad = [item for item in items if not is_finite_number(item)]
    if bad or not items:
        raise ConfigError(f"Not a list of numbers: '{text}'")
    return [float(item) for item in items]


def read_json(path: str) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"File '{path}' not found")
    with open(path) as file_handle:
        try:
            return json.load(file_handle)
        except json.JSONDecodeError as err:
            raise ConfigError(f"'{path}' is not valid JSON: {err}") from err


def write_json(path: str, payload: dict) -> str:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w") as file_handle:
        json.dump(payload, file_handle, indent=2, sort_keys=True)
        file_handle.write("\n")
    return path
