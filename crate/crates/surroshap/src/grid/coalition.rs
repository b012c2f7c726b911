//! Entity subsets as packed bitsets.

/// A subset of the `n` entities of a system.
///
/// Backed by 64-bit words, so membership tests and complements stay cheap for
/// systems far beyond the exact-enumeration range.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Coalition {
    n: usize,
    words: Vec<u64>,
}

impl Coalition {
    pub fn empty(n: usize) -> Self {
        Coalition {
            n,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn full(n: usize) -> Self {
        let mut c = Coalition::empty(n);
        for i in 0..n {
            c.insert(i);
        }
        c
    }

    pub fn from_members(n: usize, members: &[usize]) -> Self {
        let mut c = Coalition::empty(n);
        for &i in members {
            c.insert(i);
        }
        c
    }

    /// Interprets the low `n` bits of `mask` as membership. Used by exact
    /// enumeration, which indexes characteristic tables by mask.
    pub fn from_mask(n: usize, mask: usize) -> Self {
        debug_assert!(n <= usize::BITS as usize);
        let mut c = Coalition::empty(n);
        c.words[0] = mask as u64;
        if c.words.len() > 1 {
            debug_assert!(n <= 64);
        }
        c
    }

    /// The table index of this coalition, when `n` fits in a mask.
    pub fn to_mask(&self) -> usize {
        debug_assert!(self.n <= usize::BITS as usize);
        self.words[0] as usize
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn contains(&self, i: usize) -> bool {
        debug_assert!(i < self.n);
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn insert(&mut self, i: usize) {
        debug_assert!(i < self.n);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn remove(&mut self, i: usize) {
        debug_assert!(i < self.n);
        self.words[i / 64] &= !(1 << (i % 64));
    }

    pub fn size(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn complement(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        let tail = self.n % 64;
        if tail != 0 {
            *words.last_mut().unwrap() &= (1u64 << tail) - 1;
        }
        Coalition { n: self.n, words }
    }

    /// Fills `out` with the member indices in ascending order, replacing any
    /// previous contents, so one buffer can serve a whole batch.
    pub fn members_into(&self, out: &mut Vec<usize>) {
        out.clear();
        for (wi, &word) in self.words.iter().enumerate() {
            let mut w = word;
            while w != 0 {
                let bit = w.trailing_zeros() as usize;
                out.push(wi * 64 + bit);
                w &= w - 1;
            }
        }
    }

    pub fn members(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size());
        self.members_into(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_contains_size() {
        let mut c = Coalition::empty(70);
        c.insert(0);
        c.insert(63);
        c.insert(69);
        assert!(c.contains(0) && c.contains(63) && c.contains(69));
        assert!(!c.contains(1) && !c.contains(64));
        assert_eq!(c.size(), 3);
        assert_eq!(c.members(), vec![0, 63, 69]);
        c.remove(63);
        assert_eq!(c.size(), 2);
    }

    #[test]
    fn complement_partitions_the_ground_set() {
        let c = Coalition::from_members(70, &[1, 5, 64, 68]);
        let comp = c.complement();
        assert_eq!(c.size() + comp.size(), 70);
        for i in 0..70 {
            assert_ne!(c.contains(i), comp.contains(i));
        }
        assert_eq!(comp.complement(), c);
    }

    #[test]
    fn mask_round_trip() {
        let c = Coalition::from_mask(5, 0b10110);
        assert_eq!(c.members(), vec![1, 2, 4]);
        assert_eq!(c.to_mask(), 0b10110);
        assert_eq!(Coalition::full(5).to_mask(), 31);
    }
}
