use std::fmt;

use serde::{Deserialize, Serialize};

/// Dense item identifier in `[0, n_items)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

/// Level-order node index of the complete binary index tree; the root is 0
/// and the children of `n` are `2n + 1` and `2n + 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl ItemId {
    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    /// Depth of the node, root at 0.
    #[inline]
    pub fn level(self) -> usize {
        (usize::BITS - 1 - (self.index() + 1).leading_zeros()) as usize
    }

    #[inline]
    pub fn parent(self) -> Option<NodeId> {
        (self.0 > 0).then(|| NodeId((self.0 - 1) / 2))
    }

    #[inline]
    pub fn children(self) -> [NodeId; 2] {
        [NodeId(2 * self.0 + 1), NodeId(2 * self.0 + 2)]
    }

    /// First node index at `level`.
    #[inline]
    pub fn level_start(level: usize) -> usize {
        (1usize << level) - 1
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}
