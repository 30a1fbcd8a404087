use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

/// Groups example indices under a token budget: examples are sorted by
/// length (ties by index) and packed greedily. An example longer than the
/// budget gets a batch of its own.
pub fn dynamic_batches(lengths: &[usize], token_budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    let mut batches = Vec::new();
    let mut cur = Vec::new();
    let mut used = 0;
    for i in order {
        if !cur.is_empty() && used + lengths[i] > token_budget {
            batches.push(std::mem::take(&mut cur));
            used = 0;
        }
        used += lengths[i];
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

/// Cycles through fixed batches, reshuffling their order every epoch.
#[derive(Debug, Clone)]
pub struct Batcher {
    batches: Vec<Vec<usize>>,
    order: Vec<usize>,
    pos: usize,
    pub epoch: usize,
}

impl Batcher {
    pub fn new(lengths: &[usize], token_budget: usize) -> Self {
        let batches = dynamic_batches(lengths, token_budget);
        let order = (0..batches.len()).collect();
        Self {
            batches,
            order,
            pos: 0,
            epoch: 0,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn next_batch(&mut self, rng: &mut ChaCha8Rng) -> &[usize] {
        if self.pos == 0 {
            self.order.shuffle(rng);
        }
        let b = self.order[self.pos];
        self.pos += 1;
        if self.pos == self.order.len() {
            self.pos = 0;
            self.epoch += 1;
        }
        &self.batches[b]
    }
}
