//! Terms of the hybrid objective, as plain functions on numbers and as
//! differentiable graph expressions.
//!
//! All L1-type terms are means over voxels and batch. Probabilities are
//! clipped to `[LOG_EPS, 1 - LOG_EPS]` before every logarithm.

use std::fmt::Write as _;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::volume::{ClassDiscriminativeMap, ClassLabel, ClassProbabilities, Grid3, Volume};

pub const LOG_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cls: f64,
    pub lambda_l1: f64,
    pub lambda_cyc_org: f64,
    pub lambda_cyc_tar: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls: 0.1,
            lambda_l1: 10.0,
            lambda_cyc_org: 10.0,
            lambda_cyc_tar: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cls, self.lambda_l1, self.lambda_cyc_org, self.lambda_cyc_tar];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// The six raw terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub adv: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub cyc_tar: f64,
    pub cyc_org: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub adv: f64,
    pub cls_real: f64,
    pub cls_fake: f64,
    pub cyc_tar: f64,
    pub cyc_org: f64,
    pub l1_penalty: f64,
    pub total_g: f64,
    pub total_c: f64,
    pub total_d: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,adv,cls_real,cls_fake,cyc_tar,cyc_org,l1_penalty,total_G,total_C,total_D";

impl LossReport {
    pub fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("adv", self.adv),
            ("cls_real", self.cls_real),
            ("cls_fake", self.cls_fake),
            ("cyc_tar", self.cyc_tar),
            ("cyc_org", self.cyc_org),
            ("l1_penalty", self.l1_penalty),
            ("total_G", self.total_g),
            ("total_C", self.total_c),
            ("total_D", self.total_d),
        ]
    }

    /// One CSV row; values are printed with round-trip precision.
    pub fn csv_row(&self, step: u64) -> String {
        let mut row = step.to_string();
        for (_, v) in self.fields() {
            write!(row, ",{v:?}").unwrap();
        }
        row
    }
}

/// `L_G = adv + λcls·cls_fake + λ1·l1 + λorg·cyc_org + λtar·cyc_tar`,
/// `L_C = cls_real`, `L_D = -adv`.
pub fn total_losses(terms: &LossTerms, w: &LossWeights) -> Result<LossReport> {
    for (term, value) in [
        ("adv", terms.adv),
        ("cls_real", terms.cls_real),
        ("cls_fake", terms.cls_fake),
        ("cyc_tar", terms.cyc_tar),
        ("cyc_org", terms.cyc_org),
        ("l1_penalty", terms.l1),
    ] {
        if !value.is_finite() {
            return Err(Error::NonFiniteTerm { term, value });
        }
    }
    Ok(LossReport {
        adv: terms.adv,
        cls_real: terms.cls_real,
        cls_fake: terms.cls_fake,
        cyc_tar: terms.cyc_tar,
        cyc_org: terms.cyc_org,
        l1_penalty: terms.l1,
        total_g: terms.adv
            + w.lambda_cls * terms.cls_fake
            + w.lambda_l1 * terms.l1
            + w.lambda_cyc_org * terms.cyc_org
            + w.lambda_cyc_tar * terms.cyc_tar,
        total_c: terms.cls_real,
        total_d: -terms.adv,
    })
}

fn clip(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

fn mean(v: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = v.len() as f64;
    v.sum::<f64>() / n
}

/// `mean log D(x) + mean log(1 - D(x'))`.
pub fn adv_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    mean(d_real.iter().map(|&d| clip(d).ln())) + mean(d_fake.iter().map(|&d| (1.0 - clip(d)).ln()))
}

/// Mean negative log-probability of the given labels.
pub fn cls_loss(probs: &[ClassProbabilities], labels: &[ClassLabel]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::InvalidArgument(format!("{} probability rows for {} labels", probs.len(), labels.len())));
    }
    let mut acc = Vec::with_capacity(probs.len());
    for (p, y) in probs.iter().zip(labels) {
        let row = p.probs();
        if y.index() >= row.len() {
            return Err(Error::InvalidLabel { index: y.index(), k: row.len() });
        }
        acc.push(-clip(row[y.index()]).ln());
    }
    Ok(mean(acc.into_iter()))
}

/// Classification loss of real volumes against their true labels.
pub fn cls_loss_real(probs: &[ClassProbabilities], labels: &[ClassLabel]) -> Result<f64> {
    cls_loss(probs, labels)
}

/// Classification loss of synthesized volumes against their target labels.
pub fn cls_loss_fake(probs: &[ClassProbabilities], targets: &[ClassLabel]) -> Result<f64> {
    cls_loss(probs, targets)
}

pub fn mean_abs_diff(a: &Grid3, b: &Grid3) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(mean(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs())))
}

/// `mean |x'_real - x'|`.
pub fn cyc_tar_loss(real_target: &Volume, synthesized: &Volume) -> Result<f64> {
    mean_abs_diff(real_target.grid(), synthesized.grid())
}

/// `mean |x - X_r|` with `X_r = G(x', y) + x'`.
pub fn cyc_org_loss(original: &Volume, reconstructed: &Volume) -> Result<f64> {
    mean_abs_diff(original.grid(), reconstructed.grid())
}

/// `mean |Δx|`.
pub fn l1_penalty(map: &ClassDiscriminativeMap) -> f64 {
    mean(map.data().iter().map(|v| v.abs()))
}

// ----- graph forms ---------------------------------------------------------

fn clipped_ln(g: &mut Graph, p: Var) -> Var {
    let c = g.clamp(p, LOG_EPS, 1.0 - LOG_EPS);
    g.ln(c)
}

/// Graph form of [`adv_loss`] over score vectors.
pub fn adv_loss_graph(g: &mut Graph, d_real: Var, d_fake: Var) -> Var {
    let lr = clipped_ln(g, d_real);
    let real = g.mean(lr);
    let neg = g.scale(d_fake, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    // clip(1 - d) equals 1 - clip(d) on [eps, 1 - eps]
    let lf = clipped_ln(g, one_minus);
    let fake = g.mean(lf);
    g.weighted_sum(&[(real, 1.0), (fake, 1.0)])
}

/// Graph form of [`cls_loss`] from `[n, k]` logits.
pub fn cls_loss_graph(g: &mut Graph, logits: Var, labels: &[ClassLabel]) -> Var {
    let p = g.softmax(logits);
    let idx: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let picked = g.pick(p, &idx);
    let l = clipped_ln(g, picked);
    let m = g.mean(l);
    g.scale(m, -1.0)
}

pub fn mean_abs_diff_graph(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

pub fn l1_penalty_graph(g: &mut Graph, map: Var) -> Var {
    let a = g.abs(map);
    g.mean(a)
}

/// `L_G` as a graph expression over the individual term nodes.
pub fn total_g_graph(g: &mut Graph, w: &LossWeights, adv: Var, cls_fake: Var, l1: Var, cyc_org: Var, cyc_tar: Var) -> Var {
    g.weighted_sum(&[
        (adv, 1.0),
        (cls_fake, w.lambda_cls),
        (l1, w.lambda_l1),
        (cyc_org, w.lambda_cyc_org),
        (cyc_tar, w.lambda_cyc_tar),
    ])
}
