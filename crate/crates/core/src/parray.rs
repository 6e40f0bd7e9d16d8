//! Persistent arrays: every mutation yields a new version while all older
//! versions stay readable.
//!
//! Versions form a tree. Exactly one node (the root) holds the materialized
//! contents; every edge stores the delta that turns the parent's contents
//! into the child's. Reading a version *reroots* the tree there, applying
//! and inverting the deltas on the path, so the common reverse-mode access
//! pattern (create v1..vn, then read vn..v1) costs O(total delta size).
//!
//! Handles are reference counted: dropping the last handle to a version
//! frees it, together with any chain of versions that no longer leads to a
//! live handle.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::value::{stats, DenseArray};

/// Change between two adjacent versions, stored so it can be applied in
/// either direction.
#[derive(Debug, Clone, PartialEq)]
pub enum Delta {
    /// Row `index` goes from `old` to `new`.
    SetRow {
        index: usize,
        old: Vec<f64>,
        new: Vec<f64>,
    },
    AppendRow(Vec<f64>),
    /// Remove the last row, whose contents are recorded.
    DropLastRow(Vec<f64>),
}

impl Delta {
    fn elements(&self) -> usize {
        match self {
            Delta::SetRow { old, new, .. } => old.len() + new.len(),
            Delta::AppendRow(r) | Delta::DropLastRow(r) => r.len(),
        }
    }

    fn apply(&self, data: &mut Vec<f64>, rows: &mut usize, row_len: usize) {
        match self {
            Delta::SetRow { index, new, .. } => {
                data[index * row_len..(index + 1) * row_len].copy_from_slice(new);
            }
            Delta::AppendRow(r) => {
                data.extend_from_slice(r);
                *rows += 1;
            }
            Delta::DropLastRow(_) => {
                *rows -= 1;
                data.truncate(*rows * row_len);
            }
        }
        stats::on_delta_applied();
    }

    fn inverse(self) -> Delta {
        match self {
            Delta::SetRow { index, old, new } => Delta::SetRow {
                index,
                old: new,
                new: old,
            },
            Delta::AppendRow(r) => Delta::DropLastRow(r),
            Delta::DropLastRow(r) => Delta::AppendRow(r),
        }
    }
}

#[derive(Debug)]
struct Node {
    parent: Option<usize>,
    /// Delta from the parent's contents to this node's contents.
    delta: Option<Delta>,
    children: Vec<usize>,
    handles: usize,
    rows: usize,
}

#[derive(Debug)]
struct Tree {
    nodes: Vec<Option<Node>>,
    free: Vec<usize>,
    root: usize,
    /// Shape of one row (all axes after the first).
    row_shape: Vec<usize>,
    row_len: usize,
    /// Contents of the root version.
    data: Vec<f64>,
}

impl Tree {
    fn node(&self, id: usize) -> &Node {
        self.nodes[id].as_ref().expect("live version node")
    }

    fn node_mut(&mut self, id: usize) -> &mut Node {
        self.nodes[id].as_mut().expect("live version node")
    }

    fn alloc(&mut self, node: Node) -> usize {
        if let Some(id) = self.free.pop() {
            self.nodes[id] = Some(node);
            id
        } else {
            self.nodes.push(Some(node));
            self.nodes.len() - 1
        }
    }

    /// Move the materialized contents to `target`.
    fn reroot(&mut self, target: usize) {
        if target == self.root {
            return;
        }
        let mut path = vec![target];
        let mut cur = target;
        while let Some(p) = self.node(cur).parent {
            path.push(p);
            cur = p;
        }
        debug_assert_eq!(cur, self.root);
        // Walk from the root down towards the target.
        for w in path.windows(2).rev() {
            let (child, parent) = (w[0], w[1]);
            let delta = self.node_mut(child).delta.take().expect("edge delta");
            let mut rows = self.node(parent).rows;
            delta.apply(&mut self.data, &mut rows, self.row_len);
            debug_assert_eq!(rows, self.node(child).rows);
            {
                let c = self.node_mut(child);
                c.parent = None;
                c.children.push(parent);
            }
            let p = self.node_mut(parent);
            p.children.retain(|&x| x != child);
            p.parent = Some(child);
            p.delta = Some(delta.inverse());
        }
        self.root = target;
    }

    /// Create a new version from `base` by applying `delta` (which maps the
    /// base's contents to the new contents) and make it the root.
    fn derive(&mut self, base: usize, delta: Delta) -> usize {
        self.reroot(base);
        let mut rows = self.node(base).rows;
        stats::on_delta(delta.elements() as u64);
        delta.apply(&mut self.data, &mut rows, self.row_len);
        let id = self.alloc(Node {
            parent: None,
            delta: None,
            children: vec![base],
            handles: 1,
            rows,
        });
        let b = self.node_mut(base);
        b.parent = Some(id);
        b.delta = Some(delta.inverse());
        self.root = id;
        id
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.row_len..(i + 1) * self.row_len]
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        let mut s = vec![self.node(id).rows];
        s.extend_from_slice(&self.row_shape);
        s
    }

    /// Free dead versions reachable from `start` that no longer connect
    /// live versions.
    fn collect(&mut self, start: usize) {
        let mut cur = Some(start);
        while let Some(id) = cur {
            cur = None;
            let node = self.node(id);
            if node.handles > 0 {
                break;
            }
            if id == self.root {
                match node.children.len() {
                    0 => {
                        // Last version of the tree.
                        self.nodes[id] = None;
                        self.free.push(id);
                        self.data = Vec::new();
                    }
                    1 => {
                        let child = node.children[0];
                        self.reroot(child);
                        self.remove_leaf(id);
                        cur = Some(child);
                    }
                    _ => {}
                }
            } else if node.children.is_empty() {
                let parent = node.parent;
                self.remove_leaf(id);
                cur = parent;
            }
        }
    }

    fn remove_leaf(&mut self, id: usize) {
        let node = self.nodes[id].take().expect("live version node");
        debug_assert!(node.children.is_empty());
        if let Some(p) = node.parent {
            self.node_mut(p).children.retain(|&x| x != id);
        }
        self.free.push(id);
    }
}

/// Handle to one version of a persistent array.
pub struct PArray {
    tree: Rc<RefCell<Tree>>,
    node: usize,
}

impl PArray {
    /// Start a new version tree holding a copy of `a`.
    pub fn new(a: &DenseArray) -> Result<PArray> {
        if a.ndim() == 0 {
            return Err(Error::PArray("persistent arrays need at least one dimension".into()));
        }
        let rows = a.shape()[0];
        let tree = Tree {
            nodes: vec![Some(Node {
                parent: None,
                delta: None,
                children: Vec::new(),
                handles: 1,
                rows,
            })],
            free: Vec::new(),
            root: 0,
            row_shape: a.shape()[1..].to_vec(),
            row_len: a.row_len(),
            data: a.data().to_vec(),
        };
        Ok(PArray {
            tree: Rc::new(RefCell::new(tree)),
            node: 0,
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tree.borrow().shape_of(self.node)
    }

    pub fn rows(&self) -> usize {
        self.tree.borrow().node(self.node).rows
    }

    pub fn row_shape(&self) -> Vec<usize> {
        self.tree.borrow().row_shape.clone()
    }

    fn normalize(&self, i: i64) -> Result<usize> {
        let rows = self.rows() as i64;
        let j = if i < 0 { rows + i } else { i };
        if j < 0 || j >= rows {
            return Err(Error::PArray(format!("index {i} out of bounds for {rows} rows")));
        }
        Ok(j as usize)
    }

    fn check_row(&self, v: &[f64]) -> Result<()> {
        let len = self.tree.borrow().row_len;
        if v.len() != len {
            return Err(Error::PArray(format!("row of {} elements does not match row length {len}", v.len())));
        }
        Ok(())
    }

    fn handle(&self, node: usize) -> PArray {
        PArray {
            tree: self.tree.clone(),
            node,
        }
    }

    /// New version with row `i` replaced by `v`. Negative indices count
    /// from the end.
    pub fn setitem(&self, i: i64, v: &[f64]) -> Result<PArray> {
        let index = self.normalize(i)?;
        self.check_row(v)?;
        let mut t = self.tree.borrow_mut();
        t.reroot(self.node);
        let old = t.row(index).to_vec();
        let id = t.derive(
            self.node,
            Delta::SetRow {
                index,
                old,
                new: v.to_vec(),
            },
        );
        drop(t);
        Ok(self.handle(id))
    }

    pub fn append(&self, row: &[f64]) -> Result<PArray> {
        self.check_row(row)?;
        let id = self
            .tree
            .borrow_mut()
            .derive(self.node, Delta::AppendRow(row.to_vec()));
        Ok(self.handle(id))
    }

    pub fn drop_last(&self) -> Result<PArray> {
        let rows = self.rows();
        if rows == 0 {
            return Err(Error::PArray("drop_last on an array with no rows".into()));
        }
        let mut t = self.tree.borrow_mut();
        t.reroot(self.node);
        let last = t.row(rows - 1).to_vec();
        let id = t.derive(self.node, Delta::DropLastRow(last));
        drop(t);
        Ok(self.handle(id))
    }

    /// Dense copy of this version; reroots the tree here.
    pub fn checkout(&self) -> Result<DenseArray> {
        let mut t = self.tree.borrow_mut();
        t.reroot(self.node);
        let shape = t.shape_of(self.node);
        Ok(DenseArray::from_parts(shape, t.data.clone()))
    }

    /// Copy of row `i` of this version; reroots the tree here.
    pub fn row(&self, i: i64) -> Result<Vec<f64>> {
        let index = self.normalize(i)?;
        let mut t = self.tree.borrow_mut();
        t.reroot(self.node);
        Ok(t.row(index).to_vec())
    }

    pub fn is_root(&self) -> bool {
        self.tree.borrow().root == self.node
    }

    pub fn same_tree(&self, other: &PArray) -> bool {
        Rc::ptr_eq(&self.tree, &other.tree)
    }

    /// Number of versions currently stored in this handle's tree.
    pub fn version_count(&self) -> usize {
        self.tree.borrow().nodes.iter().filter(|n| n.is_some()).count()
    }

    /// Elements held by the tree: the materialized root plus all deltas.
    pub fn resident_elements(&self) -> usize {
        let t = self.tree.borrow();
        t.data.len()
            + t.nodes
                .iter()
                .flatten()
                .map(|n| n.delta.as_ref().map(|d| d.elements()).unwrap_or(0))
                .sum::<usize>()
    }
}

impl Clone for PArray {
    fn clone(&self) -> Self {
        self.tree.borrow_mut().node_mut(self.node).handles += 1;
        self.handle(self.node)
    }
}

impl Drop for PArray {
    fn drop(&mut self) {
        if let Ok(mut t) = self.tree.try_borrow_mut() {
            let n = t.node_mut(self.node);
            n.handles -= 1;
            if n.handles == 0 {
                t.collect(self.node);
            }
        }
    }
}

impl fmt::Debug for PArray {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PArray(version {}, shape {:?})", self.node, self.shape())
    }
}
