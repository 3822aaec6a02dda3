# progress.py
"""
Progress bars for the long-running stages.

tqdm reads its ``TQDM_*`` environment overrides once, at import, so the CLI
switches bars through ``set_progress`` instead.
"""

from typing import Iterable, TypeVar

from tqdm import tqdm

T = TypeVar("T")

_enabled = True


def set_progress(enabled: bool) -> None:
    global _enabled
    _enabled = enabled


def progress(iterable: Iterable[T], **kwargs) -> Iterable[T]:
    return tqdm(iterable, disable=not _enabled, **kwargs)
