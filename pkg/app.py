#!/usr/bin/env python3
# Multi-task CTC / framewise cross-entropy training lab on a synthetic aligned corpus
#
#   python3 app.py gen-data --out data
#   python3 app.py train --data data --run-dir runs/mtl --stage joint --lambda 0.9 --order random
#   python3 app.py train --data data --run-dir runs/joint --model.stack_frames=true
#   python3 app.py train --data data --run-dir runs/attn --stage attention --init-from runs/joint
#   python3 app.py convergence-report runs/attn runs/attn-random --out report.csv

import signal
import sys

from library.cli import main
from library.log import logger

if __name__ == "__main__":

    def sighandler(signum, frame):
        logger.info(f"Received signal {signum}, stopping")
        raise KeyboardInterrupt

    # Checkpoints already written stay valid, a half-finished epoch is dropped
    signal.signal(signal.SIGTERM, sighandler)

    sys.exit(main())
