import pytest

from fewshot_ssl.synthetic import synthetic_images


@pytest.fixture(scope="session")
def tiny_images():
    """Six classes of eight 32x32 images: enough for 2-way 2-shot 2-query episodes on any split."""
    return synthetic_images(n_classes=6, per_class=8, size=32, seed=3)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":").rstrip("abcd"))):
            terminalreporter.write_line(line)
