from pathlib import Path

import numpy as np
import pytest

from hdsrep.emaillog import EmailLog, EmailRecord, parse_ip, parse_log

FIXTURES = Path(__file__).parent / "fixtures"
TABLE2 = FIXTURES / "table2.csv"

IP1, IP2, IP3 = parse_ip("10.0.0.1"), parse_ip("10.0.0.2"), parse_ip("10.0.0.3")


@pytest.fixture
def table2() -> EmailLog:
    """Ten-line worked example: IP1 sends eight emails, IP3 and IP2 one each."""
    return parse_log(TABLE2)


def micro_log(rng: np.random.Generator, max_emails: int = 50, max_ips: int = 5) -> EmailLog:
    """Small random log with coarse timestamps so that ties and window edges actually occur."""
    m = int(rng.integers(0, max_emails + 1))
    k = int(rng.integers(1, max_ips + 1))
    recs = [
        EmailRecord(int(rng.integers(k)) + 1, float(rng.integers(0, 40)) / 2.0, int(rng.integers(1, 5)),
                    int(rng.integers(0, 4)), float(rng.integers(1, 100)), int(rng.integers(2)))
        for _ in range(m)
    ]
    return EmailLog.from_records(recs)


# one line per acceptance criterion, filled in by test_acceptance and echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
