use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;

/// Chooses which tokens of one image stay active at a pause stage.
pub trait TokenSelector {
    /// Returns `keep` distinct indices into `entropy`, sorted ascending.
    fn select(&mut self, entropy: &[f64], keep: usize) -> Vec<usize>;
}

/// Keeps the highest-entropy tokens. Pausing order is ascending entropy with
/// ties broken by ascending index, so equal-entropy tokens with lower
/// indices are paused first.
#[derive(Debug, Clone, Copy, Default)]
pub struct EntropySelector;

fn pause_order(entropy: &[f64], a: usize, b: usize) -> Ordering {
    entropy[a].total_cmp(&entropy[b]).then(a.cmp(&b))
}

/// Indices of the `keep` highest-entropy tokens (partial selection, no full sort).
pub fn top_entropy(entropy: &[f64], keep: usize) -> Vec<usize> {
    let n = entropy.len();
    assert!(keep <= n, "cannot keep {keep} of {n} tokens");
    let paused = n - keep;
    let mut order: Vec<usize> = (0..n).collect();
    if paused > 0 && keep > 0 {
        order.select_nth_unstable_by(paused, |&a, &b| pause_order(entropy, a, b));
    }
    let mut kept = if keep == 0 { Vec::new() } else { order.split_off(paused) };
    kept.sort_unstable();
    kept
}

impl TokenSelector for EntropySelector {
    fn select(&mut self, entropy: &[f64], keep: usize) -> Vec<usize> {
        top_entropy(entropy, keep)
    }
}

/// Keeps a uniformly random subset of tokens, drawn per image.
#[derive(Debug)]
pub struct RandomSelector<'a, R: Rng> {
    rng: &'a mut R,
}

impl<'a, R: Rng> RandomSelector<'a, R> {
    pub fn new(rng: &'a mut R) -> Self {
        Self { rng }
    }
}

impl<R: Rng> TokenSelector for RandomSelector<'_, R> {
    fn select(&mut self, entropy: &[f64], keep: usize) -> Vec<usize> {
        let mut kept = index::sample(self.rng, entropy.len(), keep).into_vec();
        kept.sort_unstable();
        kept
    }
}

/// Replays previously recorded selections in call order.
#[derive(Debug, Clone)]
pub struct FixedSelector {
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl FixedSelector {
    pub fn new(selections: impl IntoIterator<Item = Vec<usize>>) -> Self {
        Self {
            queue: selections.into_iter().collect(),
        }
    }
}

impl TokenSelector for FixedSelector {
    fn select(&mut self, entropy: &[f64], keep: usize) -> Vec<usize> {
        let kept = self.queue.pop_front().expect("fixed selector exhausted");
        assert_eq!(kept.len(), keep, "recorded selection has the wrong size");
        assert!(kept.iter().all(|&i| i < entropy.len()));
        kept
    }
}
