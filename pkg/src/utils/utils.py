"""JSON and array serialization helpers shared by layouts, layers, models, tasks and reports."""

import base64
import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from src.config.settings import SCHEMA_VERSION
from src.utils.exceptions import ValidationError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


def encode_array(array: np.ndarray) -> Dict[str, Any]:
    """Encode a float64 array as shape + base64 of its little-endian bytes (bit-exact)."""
    array = np.ascontiguousarray(array, dtype="<f8")
    return {
        "shape": list(array.shape),
        "dtype": "float64",
        "data": base64.b64encode(array.tobytes()).decode("ascii"),
    }


def decode_array(record: Dict[str, Any]) -> np.ndarray:
    """Inverse of :func:`encode_array`."""
    try:
        shape = tuple(int(s) for s in record["shape"])
        raw = base64.b64decode(record["data"])
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"Malformed array record: {e}") from e

    array = np.frombuffer(raw, dtype="<f8")
    if array.size != int(np.prod(shape, dtype=np.int64)):
        needed = int(np.prod(shape, dtype=np.int64))
        raise ValidationError(f"Array record holds {array.size} values, shape {list(shape)} needs {needed}")
    return array.reshape(shape).astype(np.float64)


def dumps(payload: Dict[str, Any]) -> str:
    """Serialize with sorted keys so equal payloads produce equal bytes."""
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def with_schema(payload: Dict[str, Any]) -> Dict[str, Any]:
    return {"schema": SCHEMA_VERSION, **payload}


def check_schema(payload: Dict[str, Any], source: str = "document") -> Dict[str, Any]:
    schema = payload.get("schema") if isinstance(payload, dict) else None
    if schema != SCHEMA_VERSION:
        raise ValidationError(f"{source}: expected schema '{SCHEMA_VERSION}', found '{schema}'")
    return payload


def save_json(payload: Dict[str, Any], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(payload), encoding="utf-8")
    logger.debug(f"Wrote {path}")
    return path


def load_json(path: Union[str, Path], require_schema: bool = True) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"File not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path} is not valid JSON: {e}") from e
    if require_schema:
        check_schema(payload, source=str(path))
    return payload
