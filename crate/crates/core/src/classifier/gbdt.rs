use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::ops::sigmoid;

const HESSIAN_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbdtConfig {
    pub num_leaves: usize,
    pub learning_rate: f64,
    pub num_trees: usize,
    /// Minimum rows on each side of a split.
    pub min_leaf: usize,
    pub max_depth: usize,
    /// Minimum hessian sum on each side of a split.
    pub min_child_hessian: f64,
    /// Stop when validation loss has not improved for this many trees. The
    /// validation set is every tenth training row.
    pub early_stopping_rounds: Option<usize>,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            num_leaves: 50,
            learning_rate: 0.03,
            num_trees: 200,
            min_leaf: 5,
            max_depth: 12,
            min_child_hessian: 1e-3,
            early_stopping_rounds: None,
        }
    }
}

impl GbdtConfig {
    fn validate(&self) -> Result<()> {
        if self.num_leaves < 2 {
            return Err(Error::Config("num_leaves must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if self.min_leaf < 1 || self.max_depth < 1 {
            return Err(Error::Config("min_leaf and max_depth must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

/// Regression tree stored as a node array with the root at index 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Index of the leaf node reached by `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
                TreeNode::Leaf { .. } => return at,
            }
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            TreeNode::Leaf { value } => value,
            TreeNode::Split { .. } => unreachable!(),
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, TreeNode::Leaf { .. }))
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    /// Log-odds of the training prior.
    pub base_score: f64,
    pub shrinkage: f64,
    pub feature_count: usize,
    pub trees: Vec<Tree>,
}

impl GbdtModel {
    pub fn raw_score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.feature_count {
            return Err(Error::Shape(format!(
                "model expects {} features, got {}",
                self.feature_count,
                x.len()
            )));
        }
        Ok(self.base_score + self.trees.iter().map(|t| self.shrinkage * t.value(x)).sum::<f64>())
    }

    /// Phishing probability.
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.raw_score(x).map(sigmoid)
    }

    pub fn predict_all(&self, rows: &[Vec<f64>]) -> Result<Vec<f64>> {
        rows.iter().map(|x| self.predict(x)).collect()
    }

    /// Leaf node index per tree.
    pub fn leaf_indices(&self, x: &[f64]) -> Vec<usize> {
        self.trees.iter().map(|t| t.leaf_index(x)).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: GbdtModel = serde_json::from_str(s)?;
        for tree in &model.trees {
            for node in &tree.nodes {
                if let TreeNode::Split {
                    feature, left, right, ..
                } = *node
                {
                    if feature >= model.feature_count
                        || left >= tree.nodes.len()
                        || right >= tree.nodes.len()
                    {
                        return Err(Error::Data("malformed tree in model file".into()));
                    }
                }
            }
        }
        Ok(model)
    }
}

fn logistic_loss(raw: &[f64], y: &[f64]) -> f64 {
    raw.iter()
        .zip(y)
        .map(|(&s, &t)| {
            // log(1 + e^s) - t·s, stable for large |s|
            s.max(0.0) + (-s.abs()).exp().ln_1p() - t * s
        })
        .sum::<f64>()
        / raw.len().max(1) as f64
}

#[derive(Clone, Copy, Debug)]
struct SplitCandidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct GrowingLeaf {
    node: usize,
    depth: usize,
    /// Row indices per feature, each sorted by that feature's value.
    sorted: Vec<Vec<u32>>,
    grad: f64,
    hess: f64,
    best: Option<SplitCandidate>,
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    g: &'a [f64],
    h: &'a [f64],
    config: &'a GbdtConfig,
}

impl TreeBuilder<'_> {
    fn best_split(&self, sorted: &[Vec<u32>], grad: f64, hess: f64) -> Option<SplitCandidate> {
        let n = sorted.first().map_or(0, Vec::len);
        let min_leaf = self.config.min_leaf;
        if n < 2 * min_leaf {
            return None;
        }
        let parent = grad * grad / hess.max(HESSIAN_FLOOR);
        let mut best: Option<SplitCandidate> = None;
        for (f, order) in sorted.iter().enumerate() {
            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..n - 1 {
                let i = order[k] as usize;
                gl += self.g[i];
                hl += self.h[i];
                let left_n = k + 1;
                if left_n < min_leaf {
                    continue;
                }
                if n - left_n < min_leaf {
                    break;
                }
                let xv = self.x[i][f];
                if xv == self.x[order[k + 1] as usize][f] {
                    continue;
                }
                let (gr, hr) = (grad - gl, hess - hl);
                if hl < self.config.min_child_hessian || hr < self.config.min_child_hessian {
                    continue;
                }
                let gain = gl * gl / hl.max(HESSIAN_FLOOR) + gr * gr / hr.max(HESSIAN_FLOOR) - parent;
                if gain > best.map_or(0.0, |b| b.gain) {
                    best = Some(SplitCandidate {
                        gain,
                        feature: f,
                        threshold: xv,
                    });
                }
            }
        }
        best
    }

    fn leaf(&self, node: usize, depth: usize, sorted: Vec<Vec<u32>>) -> GrowingLeaf {
        let (grad, hess) = sorted[0]
            .iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.g[i as usize], h + self.h[i as usize]));
        let best = if depth < self.config.max_depth {
            self.best_split(&sorted, grad, hess)
        } else {
            None
        };
        GrowingLeaf {
            node,
            depth,
            sorted,
            grad,
            hess,
            best,
        }
    }

    /// Best-first growth: repeatedly split the leaf with the largest gain.
    fn grow(&self, presorted: &[Vec<u32>]) -> Tree {
        let mut nodes = vec![TreeNode::Leaf { value: 0.0 }];
        let mut leaves = vec![self.leaf(0, 0, presorted.to_vec())];
        while leaves.len() < self.config.num_leaves {
            let pick = leaves
                .iter()
                .enumerate()
                .filter_map(|(k, l)| l.best.map(|b| (k, b.gain, l.node)))
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(b.2.cmp(&a.2)));
            let Some((k, _, _)) = pick else { break };
            let leaf = leaves.swap_remove(k);
            let split = leaf.best.expect("picked leaf has a split");
            let goes_left = |i: u32| self.x[i as usize][split.feature] <= split.threshold;
            let (left, right): (Vec<Vec<u32>>, Vec<Vec<u32>>) = leaf
                .sorted
                .iter()
                .map(|order| order.iter().partition(|&&i| goes_left(i)))
                .unzip();
            let (li, ri) = (nodes.len(), nodes.len() + 1);
            nodes.push(TreeNode::Leaf { value: 0.0 });
            nodes.push(TreeNode::Leaf { value: 0.0 });
            nodes[leaf.node] = TreeNode::Split {
                feature: split.feature,
                threshold: split.threshold,
                left: li,
                right: ri,
            };
            leaves.push(self.leaf(li, leaf.depth + 1, left));
            leaves.push(self.leaf(ri, leaf.depth + 1, right));
        }
        for leaf in leaves {
            nodes[leaf.node] = TreeNode::Leaf {
                value: -leaf.grad / leaf.hess.max(HESSIAN_FLOOR),
            };
        }
        Tree { nodes }
    }
}

fn check_inputs(x: &[Vec<f64>], labels: &[u8]) -> Result<usize> {
    if x.len() != labels.len() {
        return Err(Error::Shape(format!("{} rows but {} labels", x.len(), labels.len())));
    }
    let dim = x.first().map(Vec::len).ok_or(Error::Empty("training rows"))?;
    if x.iter().any(|r| r.len() != dim) {
        return Err(Error::Shape("training rows differ in length".into()));
    }
    if x.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("training features".into()));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || pos == labels.len() {
        return Err(Error::Data("training labels contain a single class".into()));
    }
    Ok(dim)
}

pub fn train_gbdt(x: &[Vec<f64>], labels: &[u8], config: &GbdtConfig) -> Result<GbdtModel> {
    train_gbdt_traced(x, labels, config).map(|(m, _)| m)
}

/// Trains and also returns the mean training logistic loss after each
/// tree, starting with the base-score-only model.
pub fn train_gbdt_traced(
    x: &[Vec<f64>],
    labels: &[u8],
    config: &GbdtConfig,
) -> Result<(GbdtModel, Vec<f64>)> {
    config.validate()?;
    let dim = check_inputs(x, labels)?;

    let (fit_rows, valid_rows): (Vec<usize>, Vec<usize>) = if config.early_stopping_rounds.is_some() {
        (0..x.len()).partition(|i| i % 10 != 9)
    } else {
        ((0..x.len()).collect(), Vec::new())
    };
    let fx: Vec<Vec<f64>> = fit_rows.iter().map(|&i| x[i].clone()).collect();
    let fy: Vec<f64> = fit_rows.iter().map(|&i| labels[i] as f64).collect();
    if fy.iter().all(|&t| t == fy[0]) {
        return Err(Error::Data("training labels contain a single class".into()));
    }

    let prior = fy.iter().sum::<f64>() / fy.len() as f64;
    let base_score = (prior / (1.0 - prior)).ln();
    let mut model = GbdtModel {
        base_score,
        shrinkage: config.learning_rate,
        feature_count: dim,
        trees: Vec::new(),
    };

    let presorted: Vec<Vec<u32>> = (0..dim)
        .map(|f| {
            let mut order: Vec<u32> = (0..fx.len() as u32).collect();
            order.sort_by(|&a, &b| {
                fx[a as usize][f]
                    .total_cmp(&fx[b as usize][f])
                    .then(a.cmp(&b))
            });
            order
        })
        .collect();

    let mut raw = vec![base_score; fx.len()];
    let mut valid_raw = vec![base_score; valid_rows.len()];
    let valid_y: Vec<f64> = valid_rows.iter().map(|&i| labels[i] as f64).collect();
    let mut best_valid = (f64::INFINITY, 0usize);
    let mut losses = vec![logistic_loss(&raw, &fy)];
    let mut g = vec![0.0; fx.len()];
    let mut h = vec![0.0; fx.len()];

    for t in 0..config.num_trees {
        for i in 0..fx.len() {
            let p = sigmoid(raw[i]);
            g[i] = p - fy[i];
            h[i] = p * (1.0 - p);
        }
        let tree = TreeBuilder {
            x: &fx,
            g: &g,
            h: &h,
            config,
        }
        .grow(&presorted);
        for (s, row) in raw.iter_mut().zip(&fx) {
            *s += config.learning_rate * tree.value(row);
        }
        losses.push(logistic_loss(&raw, &fy));
        if let Some(rounds) = config.early_stopping_rounds {
            for (s, &i) in valid_raw.iter_mut().zip(&valid_rows) {
                *s += config.learning_rate * tree.value(&x[i]);
            }
            model.trees.push(tree);
            let v = logistic_loss(&valid_raw, &valid_y);
            if v < best_valid.0 {
                best_valid = (v, t + 1);
            } else if t + 1 - best_valid.1 >= rounds {
                model.trees.truncate(best_valid.1);
                losses.truncate(best_valid.1 + 1);
                break;
            }
        } else {
            model.trees.push(tree);
        }
    }
    Ok((model, losses))
}
