"""Standalone producer for the embedding cache: stdlib only, no mmfuse import.

usage: write_cache.py CACHE_ROOT PRODUCER UTTERANCE_ID MODALITY V1 [V2 ...]
"""

import os
import struct
import sys
import zlib
from urllib.parse import quote

CODES = {"text": 0, "voice": 1, "face": 2, "video": 3}


def main(argv):
    root, producer, uid, modality, *values = argv
    payload = struct.pack(f"<{len(values)}f", *map(float, values))
    header = b"EMB1" + bytes([CODES[modality], 0, 0, 0]) + struct.pack("<II", len(values), zlib.crc32(payload))
    folder = os.path.join(root, quote(producer, safe=""))
    os.makedirs(folder, exist_ok=True)
    with open(os.path.join(folder, f"{quote(uid, safe='')}.{modality}.emb"), "wb") as fh:
        fh.write(header + payload)


if __name__ == "__main__":
    main(sys.argv[1:])
