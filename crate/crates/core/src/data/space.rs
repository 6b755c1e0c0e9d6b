use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use crate::error::{DuplexError, Result};

/// Which compositions are candidate labels at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum World {
    /// Seen pairs plus the predefined unseen subset.
    Closed,
    /// The full state × object product.
    Open,
}

impl fmt::Display for World {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            World::Closed => "closed",
            World::Open => "open",
        })
    }
}

impl FromStr for World {
    type Err = DuplexError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(World::Closed),
            "open" => Ok(World::Open),
            other => Err(DuplexError::InvalidArgument(format!("unknown world {other:?}"))),
        }
    }
}

/// State and object vocabularies with the seen / closed-world unseen pair sets.
///
/// Compositions are indexed `m·N + n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionSpace {
    states: Vec<String>,
    objects: Vec<String>,
    seen: BTreeSet<(usize, usize)>,
    unseen_closed: BTreeSet<(usize, usize)>,
    state_lookup: HashMap<String, usize>,
    object_lookup: HashMap<String, usize>,
}

fn lookup(names: &[String], kind: &'static str) -> Result<HashMap<String, usize>> {
    let mut map = HashMap::with_capacity(names.len());
    for (i, n) in names.iter().enumerate() {
        if n.is_empty() || n.contains(['\t', '\n', '\r']) {
            return Err(DuplexError::InvalidArgument(format!("invalid {kind} name {n:?}")));
        }
        if map.insert(n.clone(), i).is_some() {
            return Err(DuplexError::InvalidArgument(format!("duplicate {kind} {n:?}")));
        }
    }
    Ok(map)
}

impl CompositionSpace {
    pub fn new(
        states: Vec<String>,
        objects: Vec<String>,
        seen: impl IntoIterator<Item = (usize, usize)>,
        unseen_closed: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        if states.is_empty() || objects.is_empty() {
            return Err(DuplexError::Empty("state or object vocabulary"));
        }
        let state_lookup = lookup(&states, "state")?;
        let object_lookup = lookup(&objects, "object")?;
        let (m, n) = (states.len(), objects.len());
        let in_range = |&(s, o): &(usize, usize)| s < m && o < n;
        let seen: BTreeSet<_> = seen.into_iter().collect();
        let unseen_closed: BTreeSet<_> = unseen_closed.into_iter().collect();
        if let Some(p) = seen.iter().chain(&unseen_closed).find(|p| !in_range(p)) {
            return Err(DuplexError::InvalidArgument(format!(
                "pair {p:?} outside {m}×{n} vocabulary"
            )));
        }
        if let Some(p) = seen.intersection(&unseen_closed).next() {
            return Err(DuplexError::InvalidArgument(format!(
                "pair {p:?} is both seen and unseen"
            )));
        }
        Ok(CompositionSpace {
            states,
            objects,
            seen,
            unseen_closed,
            state_lookup,
            object_lookup,
        })
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_compositions(&self) -> usize {
        self.states.len() * self.objects.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn index(&self, state: usize, object: usize) -> usize {
        state * self.objects.len() + object
    }

    pub fn pair(&self, composition: usize) -> (usize, usize) {
        (composition / self.objects.len(), composition % self.objects.len())
    }

    pub fn is_seen(&self, state: usize, object: usize) -> bool {
        self.seen.contains(&(state, object))
    }

    pub fn seen_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.seen.iter().copied()
    }

    pub fn unseen_closed_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.unseen_closed.iter().copied()
    }

    /// Seen composition indices, ascending.
    pub fn seen_indices(&self) -> Vec<usize> {
        // BTreeSet order on (m, n) is composition-index order
        self.seen.iter().map(|&(m, n)| self.index(m, n)).collect()
    }

    pub fn state_index(&self, name: &str) -> Result<usize> {
        self.state_lookup
            .get(name)
            .copied()
            .ok_or_else(|| DuplexError::UnknownPrimitive {
                kind: "state",
                name: name.to_string(),
            })
    }

    pub fn object_index(&self, name: &str) -> Result<usize> {
        self.object_lookup
            .get(name)
            .copied()
            .ok_or_else(|| DuplexError::UnknownPrimitive {
                kind: "object",
                name: name.to_string(),
            })
    }

    pub fn composition_name(&self, composition: usize) -> String {
        let (m, n) = self.pair(composition);
        format!("{} {}", self.states[m], self.objects[n])
    }
}

/// Candidate compositions for `world`, in composition-index order.
pub fn target_space(space: &CompositionSpace, world: World) -> Vec<usize> {
    match world {
        World::Open => (0..space.num_compositions()).collect(),
        World::Closed => {
            let mut c: Vec<usize> = space
                .seen
                .union(&space.unseen_closed)
                .map(|&(m, n)| space.index(m, n))
                .collect();
            c.sort_unstable();
            c
        }
    }
}
