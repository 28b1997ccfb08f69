import json
import logging
import multiprocessing
import os
import time
import warnings
from contextlib import contextmanager
from dataclasses import MISSING, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import (
    Any,
    ClassVar,
    Callable,
    Iterable,
    Mapping,
    NamedTuple,
    Optional,
    Sequence,
    TypeVar,
    cast,
)

import numpy as np
import pandas as pd
import prettytable as pt
from tqdm import tqdm
from tqdm.contrib.concurrent import process_map

T1 = TypeVar("T1")
T2 = TypeVar("T2")


def proj_root() -> Path:
    return Path(__file__).parent.parent.parent


class DhrError(Exception):
    """Base class of all errors raised by this package."""


class FormatError(DhrError, ValueError):
    """A file does not follow the expected on-disk format."""


class UnsupportedError(DhrError, TypeError):
    """A well-formed input uses a dtype, rank, or mode we do not handle."""


class DomainError(DhrError, ValueError):
    """An input value lies outside the domain of an operation."""


class DegenerateInputError(DhrError, ValueError):
    pass


class GenerationError(DhrError, RuntimeError):
    pass


class ConfigError(DhrError, ValueError):
    pass


class SceneError(DhrError):
    """Raised when one stage of the per-scene pipeline fails. Wraps the original cause."""

    def __init__(self, scene_id: str, stage: str, cause: BaseException):
        self.scene_id = scene_id
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{scene_id}] {stage}: {type(cause).__name__}: {cause}")

    def __reduce__(self):
        return (SceneError, (self.scene_id, self.stage, self.cause))

    def as_record(self) -> dict[str, str]:
        return {
            "scene": self.scene_id,
            "stage": self.stage,
            "error": type(self.cause).__name__,
            "message": str(self.cause),
        }


DefaultWorkers: int = max(1, multiprocessing.cpu_count() // 2)


def env_workers() -> int | None:
    """The worker count set by `DHR_THREADS`, or None when the variable is unset."""
    if (s := os.getenv("DHR_THREADS")) is None:
        return None
    try:
        n = int(s)
    except ValueError:
        raise ConfigError(f"DHR_THREADS must be an integer, got {s!r}.")
    if n < 1:
        raise ConfigError(f"DHR_THREADS must be >= 1, got {n}.")
    return n


def default_workers() -> int:
    """The worker count to use when none is given. `DHR_THREADS` takes precedence."""
    n = env_workers()
    return n if n is not None else DefaultWorkers


@contextmanager
def with_default_workers(workers: int):
    global DefaultWorkers
    old_workers = DefaultWorkers
    DefaultWorkers = workers
    try:
        yield
    finally:
        DefaultWorkers = old_workers


def pmap(
    f: Callable[..., T1],
    *f_args: Any,
    desc: str,
    max_workers: int | None = None,
    tqdm_args: dict = {},
) -> list[T1]:
    """
    Parallel map with progress displaying. Results are always returned in input order.
    """
    n = len(f_args[0])
    assert_eq(n, *(len(xs) for xs in f_args))

    if max_workers is None:
        max_workers = default_workers()
    if max_workers <= 1 or n <= 1:
        outs = list[T1]()
        for i in tqdm(range(n), desc=desc, **tqdm_args):
            outs.append(f(*(a[i] for a in f_args)))
        return outs

    chunksize = max(1, n // (50 * max_workers))
    r = process_map(
        f,
        *f_args,
        chunksize=chunksize,
        max_workers=max_workers,
        desc=desc,
        tqdm_class=tqdm,
        **tqdm_args,
    )
    assert isinstance(r, list)
    return r


def read_file(path) -> str:
    """read file content as string."""
    with open(path, "r") as f:
        return f.read()


def write_file(path, content: str) -> None:
    """write content to file."""
    with open(path, "w") as f:
        f.write(content)


def write_json(path, obj) -> None:
    """Write `obj` as JSON with sorted keys, so equal objects give equal bytes."""
    write_file(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def not_none(x: Optional[T1]) -> T1:
    assert x is not None
    return x


def assert_eq(x: T1, *xs: T1, extra_message: Callable[[], str] = lambda: "") -> None:
    for i in range(len(xs)):
        x = xs[i - 1] if i > 0 else x
        y = xs[i]
        assert x == y, (
            f"{x} (of type {type(x).__name__}) != {y} (of type {type(y).__name__}) at equality {i}.\n"
            + extra_message()
        )


def groupby(iterable: Iterable[T1], keyfunc: Callable[[T1], T2]) -> dict[T2, list[T1]]:
    groups = dict[T2, list[T1]]()
    for item in iterable:
        key = keyfunc(item)
        groups.setdefault(key, []).append(item)
    return groups


def safe_div(a, b):
    if b == 0:
        return float("nan")
    return a / b


def scalar_stats(xs) -> dict[str, Any]:
    x = np.array(xs, dtype=np.float64)
    return {
        "mean": float(np.nanmean(x)),
        "median": float(np.nanmedian(x)),
        "min": float(np.nanmin(x)),
        "max": float(np.nanmax(x)),
    }


@dataclass
class TimeLogger:
    times: dict[str, list[float]] = field(default_factory=dict)

    @contextmanager
    def timed(self, name: str):
        start = time.perf_counter()
        yield
        end = time.perf_counter()
        self.times.setdefault(name, []).append(end - start)

    def as_dataframe(self) -> pd.DataFrame:
        df = pd.DataFrame(
            {
                "name": list(self.times.keys()),
                "count": [len(ts) for ts in self.times.values()],
                "avg_time": [sum(ts) / len(ts) for ts in self.times.values()],
                "total_time": [sum(ts) for ts in self.times.values()],
            }
        )
        df.sort_values(by="total_time", ascending=False, inplace=True)
        return df


def pretty_print_dict(
    d: dict,
    level: int = 0,
    max_show_level: int = 1000,
    float_precision: int = 5,
):
    for k, v in d.items():
        print("   " * level, end="")
        if isinstance(v, float):
            print(f"{k}: %.{float_precision}g" % v)
        elif isinstance(v, dict) or isinstance(v, list):
            if level >= max_show_level:
                print(f"{k}: ...")
            else:
                print(f"{k}:")
                if isinstance(v, list):
                    v = {f"[{i}]": e for i, e in enumerate(v)}
                pretty_print_dict(v, level=level + 1, max_show_level=max_show_level)
        else:
            print(f"{k}: {v}")


def get_modified_args(instance, flatten: bool = False) -> dict[str, Any] | None:
    """Collect only the config fields that differ from their default value, or return None
    if `instance` is not a dataclass."""
    if not is_dataclass(instance) or isinstance(instance, type):
        return None

    delta = dict[str, Any]()
    for f in fields(instance):
        v = getattr(instance, f.name)
        if f.default is not MISSING and f.default == v:
            continue
        if f.default_factory is not MISSING and f.default_factory() == v:
            continue
        rec_args = get_modified_args(v, flatten=flatten)
        if rec_args is None:
            delta[f.name] = v
        elif flatten:
            delta.update(rec_args)
        elif rec_args:
            delta[f.name] = rec_args
    return delta


def show_dict_as_tuple(d: dict) -> str:
    elems = dict[str, str]()
    for k, v in d.items():
        if isinstance(v, dict):
            v = show_dict_as_tuple(v)
        elems[k] = str(v)
    return "(" + ", ".join(f"{k}={v}" for k, v in elems.items()) + ")"


def repr_modified_args(instance, flatten: bool = False) -> str:
    ma = get_modified_args(instance, flatten=flatten)
    type_name = type(instance).__name__
    return type_name + show_dict_as_tuple(ma) if ma else type_name + "()"


def config_as_dict(instance) -> dict[str, Any]:
    """Convert a (nested) config dataclass into plain JSON-friendly values."""
    out = dict[str, Any]()
    for f in fields(instance):
        v = getattr(instance, f.name)
        if is_dataclass(v):
            v = config_as_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, Path):
            v = str(v)
        out[f.name] = v
    return out


def show_table(df: pd.DataFrame, float_format: str = ".4") -> str:
    table = pt.PrettyTable()
    table.field_names = [str(c) for c in df.columns]
    table.align = "r"
    table.set_style(pt.SINGLE_BORDER)
    table.float_format = float_format
    for row in df.itertuples(index=False):
        table.add_row(list(row))
    return table.get_string()
