//! Shared generators and brute-force oracles for integration and acceptance tests.
#![allow(dead_code)]

pub mod engine_oracle;
pub mod fixtures;
pub mod merge_oracle;

use lakekernel::id::splitmix64;

/// Small deterministic generator on top of splitmix64.
pub struct Rng(pub u64);

impl Rng {
    pub fn next(&mut self) -> u64 {
        splitmix64(&mut self.0)
    }

    /// Uniform in `0..n` (n > 0); modulo bias is irrelevant here.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next() % n as u64) as usize
    }

    pub fn chance(&mut self, num: u64, den: u64) -> bool {
        self.next() % den < num
    }

    pub fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.below(items.len())]
    }
}
