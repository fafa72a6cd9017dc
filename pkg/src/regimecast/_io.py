"""Versioned metadata headers for the CSV/JSON interchange files."""
import hashlib
import json

SCHEMA_VERSION = 1
_PREFIX = "# regimecast "


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config_dict):
    return hashlib.sha256(canonical_json(config_dict).encode()).hexdigest()[:16]


def format_header(meta):
    """Render ``meta`` as a single ``#`` comment line for a CSV file."""
    meta = {"schema": SCHEMA_VERSION, **meta}
    return _PREFIX + canonical_json(meta) + "\n"


def parse_header(line):
    if not line.startswith(_PREFIX):
        return None
    return json.loads(line[len(_PREFIX):])


def dump_json(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1, allow_nan=False)
        fh.write("\n")


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
