import os
import sys

# small matrices throughout; a single BLAS thread is faster and keeps the
# multi-process acceptance runs from oversubscribing the cores
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

sys.path.insert(0, os.path.dirname(__file__))
