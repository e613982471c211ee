"""varlat: latency variance profiling, lock scheduling and buffer-pool simulation."""
