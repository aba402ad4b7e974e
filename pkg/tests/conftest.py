import os

# Small GEMMs dominate here; one BLAS thread is faster and keeps worker
# processes from oversubscribing the machine. Set before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
