import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


class _Recorder:
    def __init__(self, results):
        self._results = results

    def __call__(self, number: int, title: str):
        return _Verdict(self._results, number, title)


class _Verdict:
    """Context manager: records PASS when the block completes, FAIL on an assertion error."""

    def __init__(self, results, number, title):
        self.results, self.number, self.title = results, number, title
        self.details = []

    def note(self, text: str):
        self.details.append(text)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = "; ".join(self.details)
        if not ok:
            detail = (detail + "; " if detail else "") + f"{exc_type.__name__}: {exc}".splitlines()[0]
        self.results[self.number] = (ok, self.title, detail)
        return False


@pytest.fixture
def criterion(request):
    return _Recorder(request.config.stash[_RESULTS])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, detail = results[number]
        terminalreporter.write_line(f"criterion {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
