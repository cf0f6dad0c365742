"""Entry point for the facedeform command line."""

from __future__ import annotations

import sys
from collections.abc import Sequence


def main(argv: Sequence[str] | None = None) -> int:
    """Run the facedeform command line and return its exit code."""
    try:
        from .app import FaceDeformApp
    except ImportError as e:
        print(f"Error importing application: {e}", file=sys.stderr)
        print("\nMake sure you have installed all dependencies:", file=sys.stderr)
        print("  pip install -e .", file=sys.stderr)
        print("\nOr install dependencies directly:", file=sys.stderr)
        print("  pip install numpy scipy torch pillow", file=sys.stderr)
        return 1

    return FaceDeformApp().run(argv)


if __name__ == "__main__":
    sys.exit(main())
