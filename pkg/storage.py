"""
Artifact storage for the lab.
Handles JSON / JSON-lines / CSV persistence and per-run output directories.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple

import pandas as pd

from config import VERSION, config_to_dict
from errors import ConfigError, DataIOError, ReportError

logger = logging.getLogger(__name__)


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)


def write_json(path: str, data: Any) -> None:
    try:
        _ensure_parent(path)
        with open(path, "w") as f:
            json.dump(data, f, indent=2)
            f.write("\n")
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}")


def read_json(path: str) -> Any:
    """Read a JSON document; parse errors carry path:line:col."""
    try:
        with open(path, "r") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}")
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}")


def write_jsonl(path: str, records: Iterable[Dict[str, Any]]) -> int:
    count = 0
    try:
        _ensure_parent(path)
        with open(path, "w") as f:
            for record in records:
                f.write(json.dumps(record, separators=(",", ":")))
                f.write("\n")
                count += 1
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}")
    return count


def read_jsonl(path: str) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yield (line number, record) for every non-blank line."""
    try:
        with open(path, "r") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    yield line_no, json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataIOError(f"{path}:{line_no}:{e.colno}: {e.msg}")
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}")


def write_csv(path: str, rows: List[Dict[str, Any]], columns: List[str]) -> None:
    try:
        _ensure_parent(path)
        frame = pd.DataFrame(rows, columns=columns)
        frame.to_csv(path, index=False, lineterminator="\n")
    except OSError as e:
        raise DataIOError(f"cannot write {path}: {e}")


def read_csv(path: str, required: Iterable[str] = (), numeric: Iterable[str] = ()) -> pd.DataFrame:
    """
    Read a CSV written by this lab. Structural problems and non-numeric
    values in numeric columns raise ReportError with the file line number.
    """
    try:
        frame = pd.read_csv(path)
    except pd.errors.ParserError as e:
        raise ReportError(f"{path}: malformed CSV: {e}")
    except pd.errors.EmptyDataError:
        raise ReportError(f"{path}: empty CSV")
    except OSError as e:
        raise DataIOError(f"cannot read {path}: {e}")

    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise ReportError(f"{path}:1: missing columns {missing}")
    for column in numeric:
        if column not in frame.columns:
            continue
        converted = pd.to_numeric(frame[column], errors="coerce")
        bad = converted.isna() & frame[column].notna()
        if bad.any():
            row = int(bad.to_numpy().nonzero()[0][0])
            # header is line 1
            raise ReportError(f"{path}:{row + 2}: non-numeric value {frame[column].iloc[row]!r} in column {column!r}")
        frame[column] = converted
    return frame


@dataclass
class RunManifest:
    command: str
    config_paths: Dict[str, str]
    seeds: Dict[str, int]
    outputs: Dict[str, str]
    # resolved config contents, keyed like config_paths
    configs: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    tool_version: str = VERSION
    timestamp: str = ""

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class RunDirectory:
    """Owns one command's output directory and the names of its artifacts."""

    def __init__(self, root: str):
        self.root = root
        self.logger = logging.getLogger(__name__)
        try:
            os.makedirs(root, exist_ok=True)
        except OSError as e:
            raise DataIOError(f"cannot create output directory {root}: {e}")

    def path(self, name: str) -> str:
        return os.path.join(self.root, name)

    @property
    def metrics_csv(self) -> str:
        return self.path("metrics.csv")

    @property
    def checkpoint(self) -> str:
        return self.path("checkpoint.json")

    @property
    def run_config(self) -> str:
        return self.path("run_config.json")

    @property
    def manifest(self) -> str:
        return self.path("manifest.json")

    def write_manifest(self, command: str, config_paths: Dict[str, str], seeds: Dict[str, int],
                       outputs: Dict[str, str], configs: Optional[Dict[str, Any]] = None) -> RunManifest:
        manifest = RunManifest(
            command=command,
            config_paths={k: os.path.abspath(v) for k, v in config_paths.items()},
            seeds=seeds,
            outputs={k: os.path.abspath(v) for k, v in outputs.items()},
            configs={k: config_to_dict(v) for k, v in (configs or {}).items()},
            timestamp=datetime.now(timezone.utc).isoformat(),
        )
        write_json(self.manifest, manifest.to_dict())
        self.logger.info(f"Wrote manifest: {self.manifest}")
        return manifest


def load_manifest(path: str) -> RunManifest:
    data = read_json(path)
    try:
        return RunManifest(**data)
    except TypeError as e:
        raise ConfigError(f"{path}: malformed manifest: {e}")
