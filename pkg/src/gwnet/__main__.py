"""``python -m gwnet``; also the ``gwnet`` console script.

``GWNET_THREADS`` sets the default BLAS thread count. It has to be applied
before numpy is first imported, hence the late import of the CLI.
"""

import os
import sys

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def main() -> int:
    threads = os.environ.get("GWNET_THREADS")
    if threads:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, threads)
    from .cli import main as cli_main

    return cli_main()


if __name__ == "__main__":
    sys.exit(main())
