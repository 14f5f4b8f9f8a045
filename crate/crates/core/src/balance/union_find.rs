use std::collections::BTreeMap;

/// Disjoint-set forest over `0..n` with path compression and union by size.
#[derive(Debug, Clone)]
pub struct Partition {
    parent: Vec<usize>,
    size: Vec<usize>,
    set_count: usize,
}

impl Partition {
    /// `n` singleton sets.
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            size: vec![1; n],
            set_count: n,
        }
    }

    /// Groups items sharing a label. Labels are arbitrary integers.
    pub fn from_labels(labels: &[usize]) -> Self {
        let mut p = Self::new(labels.len());
        let mut first: BTreeMap<usize, usize> = BTreeMap::new();
        for (i, &l) in labels.iter().enumerate() {
            match first.get(&l) {
                Some(&head) => {
                    p.union(head, i);
                }
                None => {
                    first.insert(l, i);
                }
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn set_count(&self) -> usize {
        self.set_count
    }

    pub fn find(&mut self, i: usize) -> usize {
        let mut root = i;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = i;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    /// Root lookup without compression.
    pub fn root(&self, mut i: usize) -> usize {
        while self.parent[i] != i {
            i = self.parent[i];
        }
        i
    }

    /// Returns `true` when `a` and `b` were in different sets.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        // larger set absorbs the smaller; equal sizes keep the lower root
        let (big, small) = match self.size[ra].cmp(&self.size[rb]) {
            std::cmp::Ordering::Greater => (ra, rb),
            std::cmp::Ordering::Less => (rb, ra),
            std::cmp::Ordering::Equal => (ra.min(rb), ra.max(rb)),
        };
        self.parent[small] = big;
        self.size[big] += self.size[small];
        self.set_count -= 1;
        true
    }

    pub fn same_set(&self, a: usize, b: usize) -> bool {
        self.root(a) == self.root(b)
    }

    /// Root of every item.
    pub fn roots(&self) -> Vec<usize> {
        (0..self.len()).map(|i| self.root(i)).collect()
    }

    /// Canonical label per item: the smallest member of its set. Two
    /// partitions are equal iff their canonical labels are equal.
    pub fn canonical_labels(&self) -> Vec<usize> {
        let roots = self.roots();
        let mut min_member = vec![usize::MAX; self.len()];
        for (i, &r) in roots.iter().enumerate() {
            min_member[r] = min_member[r].min(i);
        }
        roots.iter().map(|&r| min_member[r]).collect()
    }

    /// Members of each set, sets ordered by their smallest member.
    pub fn sets(&self) -> Vec<Vec<usize>> {
        let labels = self.canonical_labels();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.into_iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        groups.into_values().collect()
    }

    /// `true` when every set of `self` lies inside a single set of `coarser`.
    pub fn refines(&self, coarser: &Partition) -> bool {
        if self.len() != coarser.len() {
            return false;
        }
        (0..self.len()).all(|i| coarser.root(i) == coarser.root(self.root(i)))
    }

    /// Set size -> number of sets of that size.
    pub fn size_histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for i in 0..self.len() {
            if self.parent[i] == i {
                *hist.entry(self.size[i]).or_insert(0) += 1;
            }
        }
        hist
    }
}

impl PartialEq for Partition {
    fn eq(&self, other: &Self) -> bool {
        self.canonical_labels() == other.canonical_labels()
    }
}

impl Eq for Partition {}
