#!/usr/bin/env python3
"""Download the SNAP graph datasets used by the bloat analysis.

The tool itself never touches the network; this helper exists so the
dataset-backed acceptance checks can run. Files land in ./data (or the
directory given as the first argument; set SPARSIM_DATA to point the tests
elsewhere).

Canonical sources (Stanford Network Analysis Project):

    https://snap.stanford.edu/data/facebook_combined.txt.gz
    https://snap.stanford.edu/data/wiki-Vote.txt.gz
    https://snap.stanford.edu/data/p2p-Gnutella31.txt.gz

Published reference tables for this corpus size wiki-Vote by its maximum
node id (8297) and list the facebook ego-network collection at 60050
edges; the loader reproduces the id-based sizing automatically, but if
your facebook file carries a different edge count the bloat figure will
differ and the check reports the computed audit values.
"""

import sys
import urllib.request
from pathlib import Path

URLS = [
    "https://snap.stanford.edu/data/facebook_combined.txt.gz",
    "https://snap.stanford.edu/data/wiki-Vote.txt.gz",
    "https://snap.stanford.edu/data/p2p-Gnutella31.txt.gz",
]


def main() -> int:
    dest = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "data"
    dest.mkdir(parents=True, exist_ok=True)
    failures = 0
    for url in URLS:
        target = dest / url.rsplit("/", 1)[1]
        if target.exists():
            print(f"already present: {target}")
            continue
        print(f"fetching {url} -> {target}")
        try:
            urllib.request.urlretrieve(url, target)
        except OSError as err:
            print(f"  failed: {err}")
            failures += 1
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
