def pytest_runtest_logreport(report):
    # one visible pass/fail line per release-gate check
    if report.when == "call" and "test_acceptance" in report.nodeid:
        status = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::")[-1]
        print(f"\n[gate] {status} {name} ({report.duration:.1f}s)")
