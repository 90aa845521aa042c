#![doc = "Benchmarks live in benches/."]
