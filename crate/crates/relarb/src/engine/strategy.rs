use std::sync::Arc;

use crate::model::StrategySpec;

/// Information available to a strategy at a grid node.
#[derive(Debug, Clone, Copy)]
pub struct StrategyContext<'a> {
    /// Global grid index of the node.
    pub step: usize,
    pub t: f64,
    pub x: &'a [f64],
    pub y: &'a [f64],
    pub wealth: &'a [f64],
    pub v0: &'a [f64],
    /// Index of the noise path being simulated.
    pub path: usize,
}

/// Maps a node to portfolio proportions for one investor.
pub trait StrategyRule: Send + Sync {
    fn weights(&self, ctx: &StrategyContext<'_>, investor: usize, out: &mut [f64]);

    /// True when the weights ignore the investor index.
    fn symmetric(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MarketRule;

impl StrategyRule for MarketRule {
    fn weights(&self, ctx: &StrategyContext<'_>, _investor: usize, out: &mut [f64]) {
        let total: f64 = ctx.x.iter().sum();
        for (o, x) in out.iter_mut().zip(ctx.x) {
            *o = x / total;
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EqualRule;

impl StrategyRule for EqualRule {
    fn weights(&self, ctx: &StrategyContext<'_>, _investor: usize, out: &mut [f64]) {
        let w = 1.0 / ctx.x.len() as f64;
        out.fill(w);
    }
}

#[derive(Debug, Clone)]
pub struct FixedRule(pub Vec<f64>);

impl StrategyRule for FixedRule {
    fn weights(&self, _ctx: &StrategyContext<'_>, _investor: usize, out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }
}

/// Open-loop weights tabulated per (path, node), shared by all investors.
/// Nodes past the table reuse its last row; paths wrap modulo the table.
#[derive(Debug, Clone)]
pub struct TableRule {
    n: usize,
    nodes: usize,
    first_step: usize,
    /// paths × nodes × n
    w: Vec<f64>,
}

impl TableRule {
    pub fn new(n: usize, nodes: usize, first_step: usize, w: Vec<f64>) -> Self {
        assert!(nodes > 0 && w.len().is_multiple_of(nodes * n));
        TableRule { n, nodes, first_step, w }
    }

    pub fn paths(&self) -> usize {
        self.w.len() / (self.nodes * self.n)
    }

    pub fn row(&self, path: usize, node: usize) -> &[f64] {
        let p = path % self.paths();
        let k = node.min(self.nodes - 1);
        let off = (p * self.nodes + k) * self.n;
        &self.w[off..off + self.n]
    }
}

impl StrategyRule for TableRule {
    fn weights(&self, ctx: &StrategyContext<'_>, _investor: usize, out: &mut [f64]) {
        let node = ctx.step.saturating_sub(self.first_step);
        out.copy_from_slice(self.row(ctx.path, node));
    }
}

/// Market weights of the current state plus a tabulated offset per node.
#[derive(Debug, Clone)]
pub struct MarketOffsetRule(pub TableRule);

impl StrategyRule for MarketOffsetRule {
    fn weights(&self, ctx: &StrategyContext<'_>, investor: usize, out: &mut [f64]) {
        MarketRule.weights(ctx, investor, out);
        let node = ctx.step.saturating_sub(self.0.first_step);
        for (o, d) in out.iter_mut().zip(self.0.row(ctx.path, node)) {
            *o += d;
        }
    }
}

/// Investor 0 follows `first`; everyone else follows `rest`.
#[derive(Clone)]
pub struct DeviationRule {
    pub first: Arc<dyn StrategyRule>,
    pub rest: Arc<dyn StrategyRule>,
}

impl StrategyRule for DeviationRule {
    fn weights(&self, ctx: &StrategyContext<'_>, investor: usize, out: &mut [f64]) {
        if investor == 0 {
            self.first.weights(ctx, investor, out)
        } else {
            self.rest.weights(ctx, investor, out)
        }
    }

    fn symmetric(&self) -> bool {
        false
    }
}

pub fn rule_from_spec(spec: &StrategySpec) -> Arc<dyn StrategyRule> {
    match spec {
        StrategySpec::Market => Arc::new(MarketRule),
        StrategySpec::Equal => Arc::new(EqualRule),
        StrategySpec::Fixed(w) => Arc::new(FixedRule(w.clone())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx<'a>(x: &'a [f64], step: usize, path: usize) -> StrategyContext<'a> {
        StrategyContext { step, t: 0.0, x, y: x, wealth: &[], v0: &[], path }
    }

    #[test]
    fn market_and_equal() {
        let mut out = [0.0; 2];
        MarketRule.weights(&ctx(&[3.0, 1.0], 0, 0), 0, &mut out);
        assert_eq!(out, [0.75, 0.25]);
        EqualRule.weights(&ctx(&[3.0, 1.0], 0, 0), 0, &mut out);
        assert_eq!(out, [0.5, 0.5]);
    }

    #[test]
    fn table_lookup_wraps_and_clamps() {
        let t = TableRule::new(1, 2, 5, vec![0.1, 0.2, 0.3, 0.4]);
        let mut out = [0.0];
        t.weights(&ctx(&[1.0], 5, 1), 0, &mut out);
        assert_eq!(out, [0.3]);
        t.weights(&ctx(&[1.0], 9, 2), 0, &mut out);
        assert_eq!(out, [0.2]);
    }

    #[test]
    fn offset_rule_shifts_market_weights() {
        let r = MarketOffsetRule(TableRule::new(2, 1, 0, vec![0.1, -0.1]));
        let mut out = [0.0; 2];
        r.weights(&ctx(&[1.0, 3.0], 4, 0), 0, &mut out);
        assert!((out[0] - 0.35).abs() < 1e-15 && (out[1] - 0.65).abs() < 1e-15);
    }
}
