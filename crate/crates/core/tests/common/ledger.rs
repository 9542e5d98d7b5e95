//! Reference state machine for one shared object.
//!
//! Rules: the owner may transfer or release ownership once; borrows are
//! accepted only while nobody has released ownership; the object is
//! destroyed the first moment ownership is released and no borrow is
//! outstanding.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ev {
    Transfer(usize, usize),
    Borrow(usize),
    /// Releases the k-th borrow issued in this trace.
    Release(usize),
    OwnerRelease(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelErr {
    NotOwner,
    OwnerReleased,
    AlreadyDestroyed,
    DoubleRelease,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelState {
    Live,
    PendingDestroy,
    Destroyed,
}

#[derive(Clone, Debug)]
pub struct ObjectModel {
    pub owner: usize,
    pub released: bool,
    /// Borrower of every issued borrow, `None` once returned.
    pub borrows: Vec<Option<usize>>,
    pub destroyed: u32,
}

impl ObjectModel {
    pub fn new(owner: usize) -> Self {
        ObjectModel {
            owner,
            released: false,
            borrows: Vec::new(),
            destroyed: 0,
        }
    }

    pub fn state(&self) -> ModelState {
        if self.destroyed > 0 {
            ModelState::Destroyed
        } else if self.released {
            ModelState::PendingDestroy
        } else {
            ModelState::Live
        }
    }

    /// Sorted borrower ids currently outstanding.
    pub fn borrowers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.borrows.iter().flatten().copied().collect();
        v.sort();
        v
    }

    fn settle(&mut self) {
        if self.released && self.destroyed == 0 && self.borrows.iter().all(Option::is_none) {
            self.destroyed += 1;
        }
    }

    pub fn apply(&mut self, ev: Ev) -> Result<(), ModelErr> {
        let gone = self.destroyed > 0;
        match ev {
            Ev::Transfer(from, to) => {
                if gone {
                    return Err(ModelErr::AlreadyDestroyed);
                }
                if from != self.owner {
                    return Err(ModelErr::NotOwner);
                }
                if self.released {
                    return Err(ModelErr::OwnerReleased);
                }
                self.owner = to;
            }
            Ev::Borrow(s) => {
                if gone {
                    return Err(ModelErr::AlreadyDestroyed);
                }
                if self.released {
                    return Err(ModelErr::OwnerReleased);
                }
                self.borrows.push(Some(s));
            }
            Ev::Release(k) => match self.borrows.get_mut(k) {
                Some(slot @ Some(_)) => {
                    *slot = None;
                    self.settle();
                }
                _ => return Err(ModelErr::DoubleRelease),
            },
            Ev::OwnerRelease(s) => {
                if gone {
                    return Err(ModelErr::AlreadyDestroyed);
                }
                if s != self.owner {
                    return Err(ModelErr::NotOwner);
                }
                if self.released {
                    return Err(ModelErr::OwnerReleased);
                }
                self.released = true;
                self.settle();
            }
        }
        Ok(())
    }
}

/// Every event over `services` services, with borrow indices below `max_k`.
pub fn alphabet(services: usize, max_k: usize) -> Vec<Ev> {
    let mut v = Vec::new();
    for a in 0..services {
        for b in 0..services {
            v.push(Ev::Transfer(a, b));
        }
        v.push(Ev::Borrow(a));
        v.push(Ev::OwnerRelease(a));
    }
    for k in 0..max_k {
        v.push(Ev::Release(k));
    }
    v
}

/// All sequences of length `0..=len` over `alphabet`.
pub fn traces(alphabet: &[Ev], len: usize) -> Vec<Vec<Ev>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..len {
        let mut next = Vec::with_capacity(frontier.len() * alphabet.len());
        for t in &frontier {
            for &e in alphabet {
                let mut t2: Vec<Ev> = t.clone();
                t2.push(e);
                next.push(t2);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}
