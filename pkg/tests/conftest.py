import pytest

# acceptance verdicts, echoed again in the terminal summary
VERDICTS = []


class Verdict:
    def __init__(self, number, title, capsys):
        self.number, self.title, self.capsys = number, title, capsys
        self.checks = []

    def check(self, ok, detail):
        self.checks.append((bool(ok), detail))
        return bool(ok)

    def finish(self):
        ok = bool(self.checks) and all(c for c, _ in self.checks)
        details = "; ".join(d for _, d in self.checks)
        line = f"criterion {self.number:>2} {'PASS' if ok else 'FAIL'}: {self.title} | {details}"
        VERDICTS.append(line)
        with self.capsys.disabled():
            print("\n" + line)
        failed = [d for c, d in self.checks if not c]
        assert ok, f"criterion {self.number} failed: {failed}"


@pytest.fixture
def verdict(capsys):
    made = []

    def make(number, title):
        v = Verdict(number, title, capsys)
        made.append(v)
        return v

    return make


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
