import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

EXAMPLE_CONLL = (
    "1\tThere\t_\t_\t_\t_\t2\t_\t_\t_\n"
    "2\tis\t_\t_\t_\t_\t0\t_\t_\t_\n"
    "3\ta\t_\t_\t_\t_\t4\t_\t_\t_\n"
    "4\tdifference\t_\t_\t_\t_\t2\t_\t_\t_\n"
)
EXAMPLE_WORDS = ("There", "is", "a", "difference")
EXAMPLE_HEADS = (2, 0, 4, 2)


_CRITERIA = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _CRITERIA[name] = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda n: int(n.split("_")[2])):
        num = int(name.split("_")[2])
        label = " ".join(name.split("_")[3:])
        terminalreporter.write_line(f"criterion {num:2d}: {_CRITERIA[name]}  {label}")
