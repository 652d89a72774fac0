from __future__ import annotations

import json
from typing import Any

from pydantic import BaseModel, ConfigDict

__all__ = 'canonical_json', 'format_float', 'FrozenModel'


def canonical_json(value: Any) -> str:
    """
    JSON with sorted keys and no insignificant whitespace, so equal values always produce equal bytes.
    """
    return json.dumps(value, sort_keys=True, separators=(',', ':'), ensure_ascii=False, allow_nan=False)


def format_float(value: float) -> str:
    """
    Shortest string that round-trips `value`, used wherever numbers must be reproduced exactly (CSV, JSON).
    """
    return repr(float(value))


class FrozenModel(BaseModel):
    """
    Base for every configuration object: immutable, unknown keys rejected.
    """

    model_config = ConfigDict(frozen=True, extra='forbid')
