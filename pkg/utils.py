###############################################################################
#
# CADA desk-scale text-to-image person retrieval.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.
#
###############################################################################
import difflib
import hashlib
import json
from pathlib import Path
import sqlite3

from logbook import Logger

from cada.errors import ConfigError

log = Logger("utils")


def flatten_config(config, prefix=""):
    """{"model": {"width": 64}} -> {"model.width": 64}. Lists stay values."""
    flat = {}
    for k, v in config.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            flat.update(flatten_config(v, f"{key}."))
        else:
            flat[key] = v
    return flat


def nest_config(flat):
    nested = {}
    for key, v in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return nested


def load_config(path):
    """Read a JSON config file into dotted keys. ``comment`` keys are ignored."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")
    raw.pop("comment", None)
    return flatten_config(raw)


def parse_override(text):
    """``section.key=value``; value parsed as a JSON literal, else kept as a string."""
    key, sep, value = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value.strip()


def check_keys(values, known):
    """Reject unknown keys, suggesting close matches."""
    unknown = [k for k in values if k not in known]
    if unknown:
        hints = []
        for k in unknown:
            close = difflib.get_close_matches(k, known, n=3)
            hints.append(f"{k}" + (f" (did you mean {', '.join(close)}?)" if close else ""))
        raise ConfigError(f"unknown config keys: {'; '.join(hints)}")


def config_hash(values, keys=None):
    """sha256 of the canonical JSON of ``values`` restricted to ``keys``."""
    keys = sorted(values) if keys is None else sorted(keys)
    canonical = json.dumps({k: values[k] for k in keys if k in values}, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def file_sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def create_db_connection():
    """
    Opens a database connection.
    """
    Path("data").mkdir(parents=True, exist_ok=True)
    dir = Path("data")
    filename = "results.db"
    filepath = dir / filename
    return sqlite3.connect(filepath)


def yes_or_no(question):
    """ Simple yes no choice function. """
    reply = str(input(f"{question} (y/n): ")).lower().strip()
    if reply[:1] == "y":
        return True
    if reply[:1] == "n":
        return False
    return yes_or_no("Please enter y/n")


def clear_database():
    Path("data/results.db").unlink(missing_ok=True)


def df_to_db(agg_dict):
    """ Saves results dataframes to the sqlite3 database"""
    engine = create_db_connection()

    for table_name, df in agg_dict.items():
        try:
            # Remove whitespace before going to sql.
            df.columns = [str(name).replace(" ", "_") for name in df.columns]
            df.to_sql(table_name, con=engine, if_exists="append", index=False)
        except (sqlite3.Error, ValueError) as e:
            log.warning(f"{e} {table_name} failed.")
    engine.close()
