import bench


def pytest_terminal_summary(terminalreporter):
    if bench.CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(bench.CRITERIA):
            terminalreporter.write_line(bench.CRITERIA[n])
