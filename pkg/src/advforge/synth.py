"""Synthetic PE corpus generation.

Builds structurally valid PE files directly from struct packing, without
going through :mod:`advforge.pe`, so parser round-trips over these files
exercise two independent code paths. Used by the demo scripts, the test
corpus, and the bundled benign-content fallback pool.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FILE_ALIGN = 512
SECT_ALIGN = 4096

SECTION_NAMES = [
    b".text",
    b".rdata",
    b".data",
    b".pdata",
    b".rsrc",
    b".reloc",
    b".bss",
    b".idata",
    b".edata",
    b".tls",
]

_ASCII_BLOCKS = [
    b"This block stands in for benign application content. ",
    b"Copyright respective owners. All rights reserved. ",
    b"KERNEL32.DLL GetProcAddress LoadLibraryW ExitProcess ",
    b"https://example.invalid/releases/notes.txt ",
    b"Portable runtime strings: locale, charset, terminal, console. ",
]


def _align(value: int, alignment: int) -> int:
    rem = value % alignment
    return value if rem == 0 else value + alignment - rem


def _section_body(rng: np.random.Generator, size: int) -> bytes:
    """Mix low- and high-entropy content so feature extraction sees spread."""
    kind = rng.integers(0, 3)
    if kind == 0:
        return bytes(rng.integers(0, 256, size=size, dtype=np.uint8))
    if kind == 1:
        block = _ASCII_BLOCKS[int(rng.integers(0, len(_ASCII_BLOCKS)))]
        return (block * (size // len(block) + 1))[:size]
    byte = int(rng.integers(0, 256))
    return bytes([byte]) * size


def synth_pe(rng: np.random.Generator) -> bytes:
    """One random, structurally valid PE file."""
    pe32_plus = bool(rng.integers(0, 2))
    n_sections = int(rng.integers(1, 5))
    stub_extra = bytes(rng.integers(32, 127, size=int(rng.integers(0, 64)), dtype=np.uint8))
    stub = b"\x0e\x1f\xba\x0e\x00\xb4\x09\xcd!DOS mode stub$" + stub_extra
    e_lfanew = 64 + len(stub)

    dos = bytearray(64)
    dos[0:2] = b"MZ"
    struct.pack_into("<I", dos, 0x3C, e_lfanew)

    names = list(rng.permutation(len(SECTION_NAMES))[:n_sections])
    section_specs = []
    for idx in names:
        size = int(rng.integers(1, 9)) * FILE_ALIGN
        body = _section_body(rng, size - int(rng.integers(0, FILE_ALIGN // 2)))
        chars = 0x60000020 if not section_specs else int(
            rng.choice([0x40000040, 0xC0000040, 0x42000040])
        )
        section_specs.append((SECTION_NAMES[idx], body, chars))

    n_dirs = 16
    opt_size = (112 if pe32_plus else 96) + 8 * n_dirs
    table_off = e_lfanew + 4 + 20 + opt_size
    table_end = table_off + 40 * n_sections
    headers_size = _align(table_end + 64, FILE_ALIGN)

    placed = []
    cursor = headers_size
    va = SECT_ALIGN
    for name, body, chars in section_specs:
        raw_size = _align(len(body), FILE_ALIGN)
        placed.append((name, body, chars, cursor, raw_size, va, len(body)))
        cursor += raw_size
        va += _align(max(len(body), 1), SECT_ALIGN)

    coff = struct.pack(
        "<HHIIIHH",
        0x8664 if pe32_plus else 0x14C,
        n_sections,
        int(rng.integers(0x40000000, 0x68000000)),
        0,
        0,
        opt_size,
        0x0102 if pe32_plus else 0x0122,
    )

    opt = bytearray(opt_size)
    struct.pack_into("<H", opt, 0, 0x20B if pe32_plus else 0x10B)
    opt[2] = int(rng.integers(6, 15))
    opt[3] = int(rng.integers(0, 40))
    struct.pack_into("<I", opt, 16, SECT_ALIGN)
    if pe32_plus:
        struct.pack_into("<Q", opt, 24, 0x140000000)
    else:
        struct.pack_into("<I", opt, 28, 0x400000)
    struct.pack_into("<I", opt, 32, SECT_ALIGN)
    struct.pack_into("<I", opt, 36, FILE_ALIGN)
    struct.pack_into("<H", opt, 40, int(rng.choice([5, 6, 10])))
    struct.pack_into("<H", opt, 42, int(rng.integers(0, 3)))
    struct.pack_into("<I", opt, 56, va)
    struct.pack_into("<I", opt, 60, headers_size)
    struct.pack_into("<I", opt, 64, int(rng.integers(0, 2**20)))
    struct.pack_into("<H", opt, 68, int(rng.choice([2, 3])))
    struct.pack_into("<H", opt, 70, int(rng.choice([0x0000, 0x8160, 0x8140])))
    dirs_off = 112 if pe32_plus else 96
    struct.pack_into("<I", opt, dirs_off - 4, n_dirs)
    if rng.integers(0, 2):
        # fake debug directory entry pointing into the first section
        struct.pack_into("<II", opt, dirs_off + 8 * 6, SECT_ALIGN, 28)

    table = b""
    for name, body, chars, raw_off, raw_size, sect_va, vsize in placed:
        table += struct.pack(
            "<8sIIIIIIHHI",
            name.ljust(8, b"\x00"),
            vsize,
            sect_va,
            raw_size,
            raw_off,
            0,
            0,
            0,
            0,
            chars,
        )

    blob = bytearray(cursor)
    blob[0:64] = dos
    blob[64 : 64 + len(stub)] = stub
    blob[e_lfanew : e_lfanew + 4] = b"PE\x00\x00"
    blob[e_lfanew + 4 : e_lfanew + 24] = coff
    blob[e_lfanew + 24 : e_lfanew + 24 + opt_size] = opt
    blob[table_off:table_end] = table
    pad = bytes(rng.integers(0, 256, size=headers_size - table_end, dtype=np.uint8))
    blob[table_end:headers_size] = pad
    for name, body, chars, raw_off, raw_size, sect_va, vsize in placed:
        blob[raw_off : raw_off + len(body)] = body

    overlay = b""
    if rng.integers(0, 2):
        overlay = bytes(rng.integers(0, 256, size=int(rng.integers(1, 2048)), dtype=np.uint8))
    # appended certificate blob, advertised via the security directory
    if rng.integers(0, 4) == 0:
        cert_blob = b"\x00" * 8 + bytes(rng.integers(0, 256, size=120, dtype=np.uint8))
        struct.pack_into("<II", blob, e_lfanew + 24 + dirs_off + 8 * 4, cursor + len(overlay), len(cert_blob))
        overlay += cert_blob
    return bytes(blob) + overlay


def write_corpus(out_dir: Path | str, count: int, seed: int = 7) -> list[Path]:
    """Write ``count`` synthetic PE files named pe_0000.exe.. into out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        p = out / f"pe_{i:04d}.exe"
        p.write_bytes(synth_pe(rng))
        paths.append(p)
    return paths


def fallback_benign_pool() -> list[bytes]:
    """Synthetic stand-in for a user-supplied clean-binary pool: blocks of
    printable ASCII strings, the texture injected content draws from."""
    blocks = []
    for i, block in enumerate(_ASCII_BLOCKS):
        blocks.append((block * (4096 // len(block) + 1))[:4096])
    return blocks
