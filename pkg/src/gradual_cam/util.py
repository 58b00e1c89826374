import csv
import io
import os
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from .errors import ParseError


def ensure_dir(path: Path) -> None:
    os.makedirs(path, exist_ok=True)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    ensure_dir(path.parent)
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        with tmp_path.open("wb") as handle:
            handle.write(data)
        tmp_path.replace(path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_files(
    out_dir: Path, files: Sequence[Tuple[str, bytes]], *, stale: Iterable[str] = ()
) -> List[Path]:
    """Write every file or none of them.

    All contents are staged as ``.tmp`` siblings first; renames start only once every
    stage succeeded. Files matching a ``stale`` glob that are not part of this write are
    removed after the swap.
    """
    out_dir = Path(out_dir)
    ensure_dir(out_dir)
    targets = [out_dir / name for name, _ in files]
    if len(set(targets)) != len(targets):
        raise ValueError("duplicate output file names")
    staged: List[Path] = []
    placed: List[Path] = []
    fresh: List[bool] = []
    try:
        for target, (_, data) in zip(targets, files):
            if target.is_dir():
                raise IsADirectoryError(f"output path is a directory: {target}")
            tmp_path = target.with_name(target.name + ".tmp")
            staged.append(tmp_path)
            tmp_path.write_bytes(data)
        fresh = [not target.exists() for target in targets]
        for tmp_path, target in zip(staged, targets):
            tmp_path.replace(target)
            placed.append(target)
    except BaseException:
        for tmp_path in staged:
            tmp_path.unlink(missing_ok=True)
        # files that did not exist before this write go away again
        for target in placed:
            if fresh[targets.index(target)]:
                target.unlink(missing_ok=True)
        raise
    for pattern in stale:
        for path in out_dir.glob(pattern):
            if path not in targets and path.is_file():
                path.unlink()
    return targets


def format_float(value: float) -> str:
    return format(float(value), ".17g")


def matrix_to_csv(matrix: np.ndarray) -> str:
    if matrix.ndim != 2:
        raise ValueError(f"expected a rank-2 matrix, got rank {matrix.ndim}")
    lines = [",".join(format_float(v) for v in row) for row in matrix]
    return "\n".join(lines) + "\n"


def read_matrix_csv(path: Path) -> np.ndarray:
    text = path.read_text(encoding="utf-8")
    rows: List[List[float]] = []
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            try:
                rows.append([float(cell) for cell in stripped.split(",")])
            except ValueError as exc:
                raise ParseError(f"bad number in {path.name}: {exc}", offset) from exc
            if len(rows[-1]) != len(rows[0]):
                raise ParseError(f"ragged row in {path.name}", offset)
        offset += len(line.encode("utf-8"))
    if not rows:
        raise ParseError(f"empty matrix file {path.name}", 0)
    return np.array(rows, dtype=np.float64)


def rows_to_csv(header: List[str], rows: List[List[object]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_float(v) if isinstance(v, float) else v for v in row])
    return buffer.getvalue()
