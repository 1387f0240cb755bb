import pytest

from bec.crypto import make_keys
from bec.dag import Message, MessageStore

# Edges of the example DAGs (child: predecessors). p holds the A..E chain and
# the J..M branch; q holds the F,G branch; both share A, B, J, K.
FIG5_EDGES = {
    "A": [],
    "B": ["A"],
    "C": ["B"],
    "D": ["C"],
    "E": ["D"],
    "J": ["B"],
    "K": ["J"],
    "L": ["K"],
    "M": ["L"],
    "F": ["B"],
    "G": ["F"],
}
FIG5_P = "ABCDEJKLM"
FIG5_Q = "ABJKFG"


@pytest.fixture(scope="session")
def keys():
    return make_keys(["p", "q", "r", "s"], seed="fixtures")


@pytest.fixture(scope="session")
def fig5(keys):
    signers, _ = keys
    author = {"p": signers[0], "q": signers[1], "r": signers[2]}
    msgs = {}
    for name in "ABCDEJKLMFG":
        who = "r" if name in "ABJK" else ("q" if name in "FG" else "p")
        hs = [msgs[x].id for x in FIG5_EDGES[name]]
        msgs[name] = Message.create(author[who], f"msg {name}".encode(), hs)
    return msgs


def store_of(msgs, names):
    store = MessageStore()
    store.insert_batch([msgs[n] for n in names])
    return store


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per criterion; printed in the summary."""

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} ({detail})"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
