import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if "--deterministic" in argv:
        # must happen before numpy loads its BLAS
        for var in _THREAD_VARS:
            os.environ[var] = "1"
    from .cli import run
    return run(argv)


if __name__ == "__main__":
    sys.exit(main())
