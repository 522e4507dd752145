"""Scripted runtime the console's end-to-end test recovers.

Runs a small training loop whose second batch is single-class, which
makes the scorer raise mid-epoch. The crash is held open on a bridge
socket; the process prints the bridge address on stdout, waits for a
console to repair it (the expected fix is the guard surgery from
docs/protocol/golden/command_surgery.json), then prints the finished
history and exits 0.
"""

import sys

from insitu.console import BridgeServer, BridgeSessionSource
from insitu.vaccinate import RecoveryOptions, vaccinate_source

TRAIN = """
def train(loader, epochs):
    history = []
    for epoch in range(epochs):
        for batch in loader:
            labels, preds = batch
            score = rank_score(labels, preds)
            history.append(score)
    return history
"""


def rank_score(labels, preds):
    if len(set(labels)) < 2:
        raise ValueError("Only one class present in labels")
    pos = [p for y, p in zip(labels, preds) if y == 1]
    neg = [p for y, p in zip(labels, preds) if y == 0]
    wins = sum(1 for a in pos for b in neg if a > b)
    return wins / (len(pos) * len(neg))


LOADER = [
    ([0, 1, 0, 1], [0.12, 0.61, 0.33, 0.28]),
    ([0, 0, 0, 0], [0.12, 0.08, 0.44, 0.30]),  # single class: crashes unpatched
    ([1, 0, 1, 1], [0.80, 0.20, 0.66, 0.75]),
]


def main() -> int:
    server = BridgeServer("127.0.0.1:0").start()
    print(f"BRIDGE {server.address}", flush=True)
    # a console must show up and finish the repair within a minute, or
    # the run is torn down so nothing leaks when the driver dies
    options = RecoveryOptions(
        source=BridgeSessionSource(server, timeout=60.0), interactive="never")
    program = vaccinate_source(TRAIN, "train", {"rank_score": rank_score},
                               options=options)
    try:
        history = program.entry(LOADER, 2)
    finally:
        server.close()
    print("DONE " + " ".join(f"{h:.3f}" for h in history), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
