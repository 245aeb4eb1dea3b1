"""Emit reference mel filterbank / binary mapping fixtures with librosa.

Run once; outputs land in crates/core/tests/data/.
"""
import json
import os

import librosa
import numpy as np

OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "data")


def emit(sr, n_fft, n_mels):
    w = librosa.filters.mel(sr=sr, n_fft=n_fft, n_mels=n_mels, dtype=np.float64)
    stem = f"mel_{sr}_{n_fft}_{n_mels}"
    np.savetxt(os.path.join(OUT, stem + "_weights.csv"), w, delimiter=",", fmt="%.17g")
    binary = (w > 0).astype(np.uint8)
    np.savetxt(os.path.join(OUT, stem + "_binary.csv"), binary, delimiter=",", fmt="%d")
    bands = []
    for row in binary:
        nz = np.flatnonzero(row)
        bands.append([int(nz[0]), int(nz[-1])] if len(nz) else None)
    with open(os.path.join(OUT, stem + "_bands.json"), "w") as f:
        json.dump({"sample_rate": sr, "fft_size": n_fft, "n_bands": n_mels, "bands": bands}, f)
    print(stem, bands[:3], bands[-2:])


if __name__ == "__main__":
    os.makedirs(OUT, exist_ok=True)
    for n in (16, 60):
        emit(44100, 2048, n)
