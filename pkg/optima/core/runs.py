"""
Plumbing shared by the management commands: reading and validating a run
configuration, building the model objects it describes, applying solver
tolerance overrides and writing the manifest.
"""
import configparser
import json
import logging
import math
import re
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from django.test import override_settings

from .endowment import VarPi
from .exceptions import ConfigError, OptimaError
from .market import TimeGrid
from .serializers import RunConfigSerializer
from .signals import run_completed

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"

# Recorded in every manifest; not tested statistically.
ASSUMPTIONS = (
    "Coefficient functions are continuous and of linear growth, so the price SDE has a unique strong solution.",
    "Increments of X(s,t,x,p) satisfy a Kolmogorov moment bound uniformly on compacts (equicontinuity).",
    "Utilities are strictly concave, increasing and satisfy the Inada conditions.",
)

_SECTION = re.compile(r"^\s*\[([^\]]+)\]")
_KEY = re.compile(r"^\s*([^=:#;\s\[][^=:]*?)\s*[=:]")


class RunConfig:
    """A validated configuration plus the raw text and line index it came from."""

    def __init__(self, path, text, raw, serializer, overrides):
        self.path = Path(path)
        self.text = text
        self.raw = raw
        self.serializer = serializer
        self.overrides = overrides

    @property
    def data(self):
        return self.serializer.validated_data

    def section(self, name):
        return self.serializer.section(name)

    @property
    def kind(self):
        return self.serializer.kind

    @property
    def out_dir(self):
        return Path(self.section("output")["directory"])

    @property
    def tolerances(self):
        return {**settings.OPTIMA, **self.section("tolerances")}

    def grid(self):
        problem = self.data["problem"]
        return TimeGrid.uniform(problem["start"], self.data["market"]["horizon"], problem["steps"])

    def build(self):
        """(market, preference, endowment, VarPi estimator) for this run."""
        try:
            market = self.serializer.build_market()
            market.smoke_test()
            pref = self.serializer.build_preference()
            endowment = self.serializer.build_endowment()
            estimator = VarPi(endowment, market, mode=self.section("endowment").get("mode"))
        except (ValueError, OptimaError) as exc:
            raise ConfigError(f"{self.path}: {exc}") from exc
        section = self.section("endowment")
        if section["cache_time_nodes"] > 0 and estimator.price_dependent:
            span = section["cache_price_span"]
            times = np.linspace(self.data["problem"]["start"], market.horizon, section["cache_time_nodes"])
            axes = [np.geomspace(p / span, p * span, section["cache_price_nodes"]) for p in market.stock_prices]
            estimator.build_cache(times, axes)
        return market, pref, endowment, estimator


def line_index(text):
    """(section, key) -> line number, and section -> line number of its header."""
    index = {}
    section = None
    for number, line in enumerate(text.splitlines(), start=1):
        header = _SECTION.match(line)
        if header:
            section = header.group(1).strip()
            index[(section, None)] = number
            continue
        key = _KEY.match(line)
        if key and section is not None:
            index.setdefault((section, key.group(1).strip()), number)
    return index


def _flatten(errors, prefix=()):
    if isinstance(errors, dict):
        for key, value in errors.items():
            yield from _flatten(value, prefix + (str(key),))
    elif isinstance(errors, list) and errors and isinstance(errors[0], (dict, list)):
        for value in errors:
            yield from _flatten(value, prefix)
    else:
        for message in errors if isinstance(errors, list) else [errors]:
            yield prefix, str(message)


def format_errors(errors, index, path):
    lines = []
    for where, message in _flatten(errors):
        section = where[0] if where else None
        key = where[1] if len(where) > 1 and where[1] != "non_field_errors" else None
        number = index.get((section, key)) or index.get((section, None))
        location = f"{path}:{number}" if number else str(path)
        label = f"[{section}] {key}" if key else f"[{section}]"
        if section in (None, "non_field_errors"):
            label = "config"
        lines.append(f"{location}: {label}: {message}")
    return "\n".join(lines)


def load_config(path, seed=None, paths=None, out=None):
    """
    Read, override and validate a run configuration. Any problem, including
    a missing file, raises ConfigError with file:line diagnostics.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc.strerror or exc}") from exc

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    raw = {name: dict(parser[name]) for name in parser.sections()}

    overrides = {}
    for section, key, value in (("problem", "seed", seed), ("problem", "n_paths", paths), ("output", "directory", out)):
        if value is not None:
            raw.setdefault(section, {})[key] = str(value)
            overrides[f"{section}.{key}"] = str(value)

    serializer = RunConfigSerializer(data=raw)
    if not serializer.is_valid():
        raise ConfigError(format_errors(serializer.errors, line_index(text), path))
    logger.debug(f"Loaded {path} with overrides {overrides}")
    return RunConfig(path, text, raw, serializer, overrides)


@contextmanager
def solver_settings(config):
    """Apply the [tolerances] section on top of settings.OPTIMA for the duration of a run."""
    with override_settings(OPTIMA=config.tolerances):
        yield


def jsonable(value):
    """Plain JSON types; non-finite floats become the strings 'inf', '-inf' and 'nan'."""
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
    return value


def write_manifest(config, command, results, files=()):
    """
    Write manifest.json: the verbatim config, the validated values, overrides,
    effective tolerances, seeds, assumptions and results.
    """
    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = config.data["problem"]
    manifest = {
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(),
        "config_file": str(config.path),
        "config_text": config.text,
        "config": config.serializer.data,
        "overrides": config.overrides,
        "tolerances": config.tolerances,
        "threads": settings.OPTIMA_THREADS,
        "seeds": {"paths": problem["seed"], "endowment": config.section("endowment")["mc_seed"]},
        "assumptions": list(ASSUMPTIONS),
        "results": results,
        "files": list(files),
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(jsonable(manifest), indent=2, sort_keys=False) + "\n", encoding="utf-8")
    logger.info(f"Wrote {path}")
    return path


def finish(config, command, results, files=()):
    """Write the manifest and announce the run."""
    write_manifest(config, command, results, files)
    run_completed.send(sender=command, command=command, out_dir=config.out_dir, summary=jsonable(results))


class RunCommand(BaseCommand):
    """
    Shared --config/--out/--seed/--paths handling and the exit-code contract:
    2 for configuration errors, 3 for solver errors. Subclasses implement run().
    """
    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument("--config", required=True, help="Run configuration (INI sections).")
        parser.add_argument("--out", help="Output directory; overrides [output] directory.")
        parser.add_argument("--seed", type=int, help="Overrides [problem] seed.")
        parser.add_argument("--paths", type=int, help="Overrides [problem] n_paths.")

    def run(self, config):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            config = load_config(options["config"], options.get("seed"), options.get("paths"), options.get("out"))
            with solver_settings(config):
                self.run(config)
        except ConfigError as e:
            logger.error(f"{self.command_name()} rejected its configuration: {e}", exc_info=True)
            raise CommandError(str(e), returncode=2) from e
        except OptimaError as e:
            logger.error(f"{self.command_name()} failed: {e}", exc_info=True)
            raise CommandError(f"{type(e).__name__}: {e}", returncode=3) from e

    def command_name(self):
        return self.__module__.rsplit(".", 1)[-1]
