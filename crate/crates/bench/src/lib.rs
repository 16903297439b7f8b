// SPDX-License-Identifier: MIT OR Apache-2.0

//! Benchmarks for `stepfaith-core`; see `benches/`.
