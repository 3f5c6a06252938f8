"""Rotation-equivariant pose networks with cyclic convolution layers."""

from ._rinn import *  # noqa: F401,F403
from ._rinn import cli as _cli


def main(argv=None):
    import sys

    code, out, err = _cli(list(sys.argv[1:] if argv is None else argv))
    sys.stdout.write(out)
    sys.stderr.write(err)
    return code
