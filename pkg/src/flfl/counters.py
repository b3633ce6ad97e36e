"""Call counters for checking which code paths a run exercised."""
import threading
from collections import Counter

_lock = threading.Lock()
_counts = Counter()


def bump(name, n=1):
    with _lock:
        _counts[name] += n


def snapshot():
    with _lock:
        return dict(_counts)


def reset():
    with _lock:
        _counts.clear()
