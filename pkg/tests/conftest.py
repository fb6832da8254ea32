from twinflow.network import Intersection, Road, RoadNetwork


def straight_road(length=2000.0, lanes=1, speed_limit=13.89):
    """A single road between two boundary nodes, no junctions."""
    return RoadNetwork(
        intersections=(
            Intersection("a", 0.0, 0.0, "boundary"),
            Intersection("b", length, 0.0, "boundary"),
        ),
        roads=(Road("r", "a", "b", length, lanes, speed_limit),),
        connections=(),
    )


# "criterion N: PASS/FAIL ..." lines recorded by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
