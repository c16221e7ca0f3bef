"""Suite-wide wall clock.

Imported once when collection starts; test_zz_runtime_budget (collected
last by name) asserts the elapsed time of everything that ran before it.
"""

import time

SUITE_START = time.perf_counter()
