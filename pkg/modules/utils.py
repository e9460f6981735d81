"""
Utility module for the ID pruning toolkit.
Handles logging, progress bars, the CLI banner and atomic artifact writes.
"""
import csv
import io
import json
import os
import shutil
import sys
import time
from typing import Any, Dict, Iterable, Optional, Sequence

from . import __version__, config

# =============================================================================
# LOGGING & CONSOLE
# =============================================================================


def print_banner(seed=None, config_hash=None):
    """Prints the toolkit banner to standard error."""
    banner = r"""
  ___ ___    ___
 |_ _|   \  | _ \_ _ _  _ _ _  ___
  | || |) | |  _/ '_| || | ' \/ -_)
 |___|___/  |_| |_|  \_,_|_||_\___|
"""
    out = sys.stderr
    print("=" * 60, file=out)
    print(f"   INTERPOLATIVE DECOMPOSITION PRUNING - v{__version__}", file=out)
    print("=" * 60, file=out)
    print("\033[96m" + banner + "\033[0m", file=out)
    if seed is not None:
        print(f"   Seed        : {seed}", file=out)
    if config_hash:
        print(f"   Config Hash : {config_hash[:16]}", file=out)
    print("-" * 60, file=out)


def log(message, level="INFO", to_console=True):
    """Logs a message to both console and log file."""
    timestamp = time.strftime("%Y-%m-%d %H:%M:%S")

    entry = f"[{timestamp}] [{level}] {message}"

    # DEBUG messages only reach the console in debug mode
    should_print = to_console and (
        level != "DEBUG" or config.DEBUG_LOGGING
    )

    if should_print:
        prefix = {
            "ERROR": "!!! ", "WARNING": "! ", "CRITICAL": "XXX "
        }.get(level, "")
        # Console chatter goes to stderr; stdout is reserved for results
        print(f"\r\033[K{prefix}{message}", file=sys.stderr)

    if config.LOG_FILE:
        with open(config.LOG_FILE, "a", encoding="utf-8") as f:
            f.write(entry + "\n")
    sys.stderr.flush()


def _format_time_component(seconds):
    """Formats seconds into HH:MM:SS."""
    h = int(seconds // 3600)
    m = int((seconds % 3600) // 60)
    s = int(seconds % 60)
    return f'{h:02d}:{m:02d}:{s:02d}'


def print_progress_bar(
    iteration, total, prefix='', suffix='', decimals=1, length=20,
    fill='█', empty='░', elapsed=None
):
    """
    Call in a loop to create terminal progress bar.
    """
    tot = float(total) if total and float(total) > 0 else 1.0
    it = float(iteration)

    percent_s = ("{0:." + str(decimals) + "f}").format(100 * (it / tot))
    filled_l = int(length * it // tot)
    bar = fill * filled_l + empty * (length - filled_l)

    parts = [f'{percent_s:>5}%']
    if elapsed is not None:
        parts.append(_format_time_component(elapsed))
    if suffix:
        parts.append(suffix)
    full_bar = f'[{bar}] {" | ".join(parts)}'

    term_width = shutil.get_terminal_size((80, 20)).columns - 1
    max_prefix = max(10, term_width - len(full_bar) - 5)
    if len(prefix) > max_prefix:
        prefix = "..." + prefix[-(max_prefix - 3):]

    try:
        sys.stderr.write(f'\r\033[K{prefix}{full_bar}')
    except UnicodeEncodeError:
        safe_bar = '#' * filled_l + '-' * (length - filled_l)
        sys.stderr.write(f'\r{prefix}[{safe_bar}] {" | ".join(parts)}')
    sys.stderr.flush()

    if iteration >= total:
        sys.stderr.write("\n")


# =============================================================================
# ARTIFACT WRITERS
# =============================================================================

def provenance(config_hash, seed):
    """The reproducibility block embedded in every artifact."""
    return {"config_hash": config_hash, "seed": seed, "toolkit_version": __version__}


def atomic_write_bytes(path, payload: bytes):
    """Writes via a temp file and an atomic replace so readers never see partial files."""
    temp_path = path + ".tmp"
    try:
        with open(temp_path, "wb") as f:
            f.write(payload)
        os.replace(temp_path, path)
    except Exception:
        if os.path.exists(temp_path):
            try:
                os.remove(temp_path)
            except OSError:
                pass
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, allow_nan=False) + "\n"


def write_json(obj: Any, path):
    atomic_write_text(path, dumps_json(obj))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]],
              meta: Optional[Dict[str, Any]] = None):
    """Writes a CSV table; `meta` becomes leading '#' comment lines."""
    buf = io.StringIO()
    for key, value in (meta or {}).items():
        buf.write(f"# {key}={value}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_cell(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def ensure_dir(path):
    if path and not os.path.isdir(path):
        os.makedirs(path, exist_ok=True)
    return path
