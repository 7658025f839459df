#!/usr/bin/env python3
"""
Portrait SR - Root Entry Point

Runs the pipeline subcommands implemented in src/main.py, e.g.
    python main.py synth --count 100
    python main.py restore --input lq.png --output out.png
"""

import sys
from pathlib import Path

# Ensure the project root is importable when launched from elsewhere
root = Path(__file__).parent
if str(root) not in sys.path:
    sys.path.insert(0, str(root))


def main() -> int:
    """Main entry point"""
    # Import here so the path fix above applies
    from src.main import dispatch

    return dispatch(sys.argv[1:])


if __name__ == "__main__":
    sys.exit(main())
