"""Regenerate src/cascade_sgg/data/word_vectors.txt.

Toy 32-d vectors for the bundled vocabularies. Words sharing a stem share a
stem component, so inflections land close together; each word adds a small
private component. Purely a hermetic stand-in for pretrained embeddings.
"""

import hashlib
from pathlib import Path

import numpy as np

DIM = 32
STEMS = {
    "dock": ["dock", "docked", "docking"],
    "park": ["parked", "parking", "park"],
    "parallel": ["parallelly", "parallel", "alongside"],
    "same": ["same"],
    "different": ["different"],
    "connect": ["connected", "connect"],
    "supply": ["supplied", "supply"],
    "taxi": ["taxiing", "taxi"],
    "over": ["over", "above"],
    "away": ["away", "from", "leaving"],
    "approach": ["approach", "approaching", "near"],
    "incorrect": ["incorrectly", "wrong"],
    "func": ["at", "on", "in", "to", "with", "the", "by", "of"],
    "apron": ["apron"],
    "vessel": ["ship", "boat"],
    "aircraft": ["airplane", "plane"],
    "vehicle": ["truck", "car"],
}


def _vec(key: str) -> np.ndarray:
    seed = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
    v = np.random.default_rng(seed).normal(size=DIM)
    return v / np.linalg.norm(v)


def main() -> None:
    rows = []
    for stem, words in STEMS.items():
        base = _vec("stem:" + stem)
        for w in words:
            v = base + 0.35 * _vec("word:" + w)
            rows.append(f"{w} " + " ".join(f"{x:.6f}" for x in v / np.linalg.norm(v)))
    out = Path(__file__).resolve().parents[1] / "src" / "cascade_sgg" / "data" / "word_vectors.txt"
    out.write_text("\n".join(sorted(rows)) + "\n")


if __name__ == "__main__":
    main()
