"""Flat binary containers: corpus waves, checkpoints, embedding dumps.

One shared layout: 4-byte magic, u32 version, u64 header length, a JSON
header describing named arrays (shape + payload offset), then the raw
payload of 32-bit little-endian floats. Writing is fully deterministic so
identical inputs produce identical bytes.
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from . import synth
from .config import CorpusConfig
from .errors import FormatError, InvalidInputError
from .synth import Corpus, Utterance, Vocabulary

MAGIC_CORPUS = b"DPCW"
MAGIC_CHECKPOINT = b"DPCK"
MAGIC_EMBEDDINGS = b"DPED"
CONTAINER_VERSION = 1

_HEAD = struct.Struct("<4sIQ")


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> list[dict]:
    """Write named float32 arrays plus a JSON meta block; returns the index."""
    if len(magic) != 4:
        raise InvalidInputError("magic must be 4 bytes")
    index = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        blob = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "length": arr.size})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(magic, CONTAINER_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return index


def read_container(path, expected_magic: bytes | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a container back into (meta, {name: float32 array})."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEAD.size:
        raise FormatError(f"{path}: truncated container (no header)")
    magic, version, header_len = _HEAD.unpack_from(raw)
    if expected_magic is not None and magic != expected_magic:
        raise FormatError(f"{path}: magic {magic!r} != expected {expected_magic!r}")
    if version != CONTAINER_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    try:
        header = json.loads(raw[_HEAD.size : _HEAD.size + header_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad JSON header: {exc}") from exc
    payload = raw[_HEAD.size + header_len :]
    arrays = {}
    for entry in header["arrays"]:
        start = entry["offset"]  # byte offset into the payload
        nbytes = entry["length"] * 4
        chunk = payload[start : start + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: array {entry['name']!r} runs past end of payload")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr
    return header["meta"], arrays


# --- corpus on disk -------------------------------------------------------

def save_corpus(corpus: Corpus, out_dir) -> None:
    """Write waves.bin + manifest.jsonl + stats.json + corpus_config.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    arrays: dict[str, np.ndarray] = {}
    order: list[tuple[str, Utterance]] = []
    for split in synth.SPLITS:
        for u in corpus.splits[split]:
            arrays[f"{u.uid}/clean"] = u.clean_wave
            arrays[f"{u.uid}/noisy"] = u.noisy_wave
            order.append((split, u))
    index = write_container(
        out / "waves.bin",
        MAGIC_CORPUS,
        {"n_utterances": len(order)},
        arrays,
    )
    by_name = {e["name"]: e for e in index}

    with open(out / "manifest.jsonl", "w") as fh:
        for split, u in order:
            clean = by_name[f"{u.uid}/clean"]
            noisy = by_name[f"{u.uid}/noisy"]
            record = {
                "id": u.uid,
                "split": split,
                "tokens": u.tokens.tolist(),
                "snr_db": u.snr_db,
                "clean_offset": clean["offset"],
                "clean_len": clean["length"],
                "noisy_offset": noisy["offset"],
                "noisy_len": noisy["length"],
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    (out / "stats.json").write_text(
        json.dumps(synth.corpus_stats(corpus), indent=2, sort_keys=True) + "\n"
    )
    (out / "corpus_config.json").write_text(
        json.dumps(dataclasses.asdict(corpus.config), indent=2, sort_keys=True) + "\n"
    )


def load_corpus(corpus_dir) -> Corpus:
    corpus_dir = Path(corpus_dir)
    cfg_path = corpus_dir / "corpus_config.json"
    if not cfg_path.exists():
        raise FormatError(f"{cfg_path}: missing corpus config")
    config = CorpusConfig(**json.loads(cfg_path.read_text()))
    _, arrays = read_container(corpus_dir / "waves.bin", MAGIC_CORPUS)

    splits: dict[str, list[Utterance]] = {"train": [], "valid": [], "test": []}
    manifest = corpus_dir / "manifest.jsonl"
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest}:{lineno}: bad manifest record: {exc}") from exc
        uid = rec["id"]
        splits[rec["split"]].append(
            Utterance(
                uid=uid,
                tokens=np.asarray(rec["tokens"], dtype=np.int64),
                clean_wave=arrays[f"{uid}/clean"],
                noisy_wave=arrays[f"{uid}/noisy"],
                snr_db=float(rec["snr_db"]),
            )
        )
    return Corpus(config=config, vocab=Vocabulary(config.n_content_tokens), splits=splits)
