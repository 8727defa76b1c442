#!/usr/bin/env python3
"""
Run catalog initialization script.
Creates the run, artifact and gate_result tables.
"""

import sys

from labconfig import find_catalog_url
from models import Base, open_catalog


def init_catalog(url=None):
    """Initialize the catalog tables"""
    url = url or find_catalog_url()
    print("[catalog] Creating catalog tables...")
    engine, _ = open_catalog(url)
    print(f"[catalog] Tables ready: {', '.join(sorted(Base.metadata.tables))}")
    if engine.dialect.name == 'postgresql':
        print("[catalog] Using PostgreSQL catalog")
    else:
        print(f"[catalog] Using {engine.dialect.name} catalog at {url}")
    return engine


if __name__ == "__main__":
    try:
        init_catalog(sys.argv[1] if len(sys.argv) > 1 else None)
    except Exception as e:
        print(f"[catalog] Initialization failed: {e}")
        sys.exit(1)
