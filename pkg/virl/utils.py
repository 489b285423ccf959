import csv
import hashlib
import io
import json
import os
import tempfile

from loguru import logger

from .errors import UsageError


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any mix of ints and strings."""
    text = '/'.join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & ((1 << 63) - 1)


def atomic_write_bytes(path: str, data: bytes) -> None:
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp_', dir=folder)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode('utf-8'))


def write_csv(path: str, header: list, rows: list) -> None:
    buffer = io.StringIO(newline='')
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buffer.getvalue())


def read_csv(path: str) -> list:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


SETTINGS_NAME = 'settings.json'


def _as_json(settings: dict):
    return json.loads(json.dumps(settings))


def settings_match(folder: str, settings: dict) -> bool:
    """True when folder holds outputs recorded with exactly these settings."""
    path = os.path.join(folder, SETTINGS_NAME)
    if not os.path.exists(path):
        return False
    try:
        with open(path, 'r', encoding='utf-8') as f:
            recorded = json.load(f)
    except json.JSONDecodeError:
        logger.warning(f'Unreadable {path}; recomputing')
        return False
    return recorded == _as_json(settings)


def write_settings(folder: str, settings: dict) -> None:
    atomic_write_text(os.path.join(folder, SETTINGS_NAME), json.dumps(_as_json(settings), indent=2) + '\n')


def format_float(value: float) -> str:
    # repr round-trips float64 exactly and is stable across runs
    return repr(float(value))


class OutputLock:
    """Exclusive lock file guarding one output directory."""

    def __init__(self, folder: str):
        self.folder = folder
        self.path = os.path.join(folder, '.lock')
        self._fd = None

    def __enter__(self):
        os.makedirs(self.folder, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise UsageError(f'Output directory {self.folder} is locked by another run ({self.path})')
        os.write(self._fd, str(os.getpid()).encode('ascii'))
        return self

    def __exit__(self, exc_type, exc, tb):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            os.remove(self.path)
        except FileNotFoundError:
            logger.warning(f'Lock file {self.path} vanished before release')
        return False
