import dataclasses
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np


def convert_numpy_types(obj: Any) -> Union[Dict, List, str, int, float, bool, None]:
    """
    Recursively convert pipeline results to JSON-native Python values.

    Dataclasses become dicts, NumPy scalars and arrays become Python numbers
    and lists, enums become their values, paths become strings, and
    non-finite floats become None.
    """
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: convert_numpy_types(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(convert_numpy_types(k)): convert_numpy_types(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [convert_numpy_types(i) for i in obj]
    if isinstance(obj, np.ndarray):
        return convert_numpy_types(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj
