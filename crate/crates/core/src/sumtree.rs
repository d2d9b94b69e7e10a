//! Binary partial-sum tree over non-negative weights.
//!
//! Leaves live at `nodes[cap + i]`; every internal node is recomputed from
//! its two children on update, so the root is always the exact tree sum of
//! the current leaves and no drift accumulates from incremental deltas.

#[derive(Debug, Clone)]
pub struct SumTree {
    len: usize,
    cap: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(weights: &[f64]) -> Self {
        let len = weights.len();
        let cap = len.next_power_of_two().max(1);
        let mut nodes = vec![0.0; 2 * cap];
        nodes[cap..cap + len].copy_from_slice(weights);
        for i in (1..cap).rev() {
            nodes[i] = nodes[2 * i] + nodes[2 * i + 1];
        }
        SumTree { len, cap, nodes }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.cap + i]
    }

    #[inline]
    pub fn set(&mut self, i: usize, w: f64) {
        debug_assert!(w >= 0.0);
        let mut idx = self.cap + i;
        if self.nodes[idx] == w {
            return;
        }
        self.nodes[idx] = w;
        while idx > 1 {
            idx >>= 1;
            self.nodes[idx] = self.nodes[2 * idx] + self.nodes[2 * idx + 1];
        }
    }

    /// Leaf `i` such that the prefix sum before `i` is `<= target <` the
    /// prefix sum through `i`, for `target` in `[0, total)`.
    #[inline]
    pub fn find(&self, mut target: f64) -> usize {
        let mut idx = 1;
        while idx < self.cap {
            // branch-free descent; the comparison is unpredictable
            let left = self.nodes[2 * idx];
            let right = (target >= left) as usize;
            target -= left * right as f64;
            idx = 2 * idx + right;
        }
        idx - self.cap
    }

    /// Plain left-to-right sum of the leaves.
    pub fn recompute_total(&self) -> f64 {
        self.nodes[self.cap..self.cap + self.len].iter().sum()
    }
}
