import os

# single-threaded BLAS beats the threaded default for this engine's small
# matmuls; the experiment runners parallelize across processes instead
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: full-pipeline acceptance criteria (slow, trains models)"
    )
