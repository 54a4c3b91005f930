//! Randomized differential checks of the `align` kernels against
//! straightforward loop implementations, plus the algebraic properties the
//! kernels must satisfy. Shared by the `mathcheck` CLI and the test suite.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{
    grpo_advantages, kl_schulman, loss_fast, loss_slow, loss_total, reward_fuse, rl_loss_fast, rl_loss_slow,
    rl_loss_total, sim_reward, stt_reward_mock, CandidateLogProbs, FastLogProbs, FastLossMode, FastRlNorm,
    GroupRollout, LogProbGrid, LossWeights, RewardWeights, SlowLogProbs, SttPenalties,
};
use crate::transcript::RichSegment;

pub const REL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub cases: usize,
    /// Worst relative error seen (0 for exact/boolean checks).
    pub max_rel_err: f64,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckConfig {
    pub seed: u64,
    pub cases: usize,
    pub kl_pairs: usize,
    pub kl_samples: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { seed: 0x5eed, cases: 1000, kl_pairs: 50, kl_samples: 10_000 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub rows: Vec<CheckRow>,
    pub elapsed_ms: f64,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn row(&self, name: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<28} {:>6} {:>12}  result", "check", "cases", "max_rel_err");
        for r in &self.rows {
            let verdict = if r.passed { "PASS" } else { "FAIL" };
            let _ = write!(s, "{:<28} {:>6} {:>12.3e}  {verdict}", r.name, r.cases, r.max_rel_err);
            if !r.detail.is_empty() {
                let _ = write!(s, "  {}", r.detail);
            }
            s.push('\n');
        }
        let passed = self.rows.iter().filter(|r| r.passed).count();
        let _ = writeln!(s, "{passed}/{} checks passed in {:.1} ms", self.rows.len(), self.elapsed_ms);
        s
    }
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        return 0.0;
    }
    let d = (got - want).abs();
    if want == 0.0 {
        d
    } else {
        d / want.abs()
    }
}

struct Tracker {
    name: &'static str,
    cases: usize,
    worst: f64,
    failure: Option<String>,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self { name, cases: 0, worst: 0.0, failure: None }
    }

    fn compare(&mut self, case: usize, got: f64, want: f64) {
        let e = rel_err(got, want);
        if e > self.worst || e.is_nan() {
            self.worst = e;
        }
        if (e > REL_TOL || e.is_nan()) && self.failure.is_none() {
            self.failure = Some(format!("case {case}: got {got:e}, oracle {want:e}"));
        }
    }

    fn require(&mut self, case: usize, ok: bool, what: &str) {
        if !ok && self.failure.is_none() {
            self.failure = Some(format!("case {case}: {what}"));
        }
    }

    fn done(mut self, cases: usize) -> CheckRow {
        self.cases = cases;
        CheckRow {
            name: self.name.to_string(),
            cases: self.cases,
            max_rel_err: self.worst,
            passed: self.failure.is_none(),
            detail: self.failure.unwrap_or_default(),
        }
    }
}

// ---- naive oracles --------------------------------------------------------

fn oracle_loss_slow(logp: &[f64], mask: &[f64], lambda: &[f64]) -> f64 {
    let mut total = 0.0;
    for t in 0..logp.len() {
        total -= mask[t] * lambda[t] * logp[t];
    }
    total
}

fn oracle_loss_fast(t_len: usize, n: usize, logp: &[f64], w: &[f64]) -> f64 {
    let mut norm = 0.0;
    for k in 1..n {
        norm += w[k];
    }
    let mut total = 0.0;
    for t in 0..t_len {
        for k in 0..n {
            total += w[k] * logp[t * n + k];
        }
    }
    -total / norm
}

/// `exp(r) - r - 1` via its Taylor series near 0, directly elsewhere.
fn oracle_k3(cur: f64, reference: f64) -> f64 {
    let mut r = reference - cur;
    if r > 30.0 {
        r = 30.0;
    }
    if r.abs() < 0.5 {
        let mut term = r * r / 2.0;
        let mut sum = 0.0f64;
        let mut n = 2.0;
        while term.abs() > 1e-300 && term.abs() > sum.abs() * 1e-18 {
            sum += term;
            n += 1.0;
            term *= r / n;
        }
        sum
    } else {
        r.exp() - r - 1.0
    }
}

fn oracle_advantages(r: &[f64]) -> Vec<f64> {
    let mut mean = 0.0;
    for x in r {
        mean += x;
    }
    mean /= r.len() as f64;
    let mut out = Vec::new();
    for x in r {
        out.push(x - mean);
    }
    out
}

fn oracle_rl_slow(a: f64, cur: &[f64], reference: &[f64], beta: f64) -> f64 {
    let t = cur.len() as f64;
    let mut pg = 0.0;
    let mut kl = 0.0;
    for i in 0..cur.len() {
        pg += -a * cur[i];
        kl += oracle_k3(cur[i], reference[i]);
    }
    pg / t + beta * kl / t
}

fn oracle_rl_fast(a: f64, t_len: usize, n: usize, cur: &[f64], reference: &[f64], beta: f64, sizes: &[usize], by_size: bool) -> f64 {
    let mut total = 0.0;
    for t in 0..t_len {
        for k in 1..n {
            let idx = t * n + k;
            let term = -a * cur[idx] + beta * oracle_k3(cur[idx], reference[idx]);
            total += if by_size { term / sizes[k - 1] as f64 } else { term };
        }
    }
    if by_size {
        total
    } else {
        total / (t_len * (n - 1)) as f64
    }
}

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
enum OTok {
    W(String),
    S(u32),
    V(String),
}

fn otoks(segs: &[RichSegment]) -> Vec<OTok> {
    let mut v = Vec::new();
    for s in segs {
        match s {
            RichSegment::Words(ws) => {
                for w in ws {
                    v.push(OTok::W(w.clone()));
                }
            }
            RichSegment::Speaker(k) => v.push(OTok::S(*k)),
            RichSegment::Vocal(l) => v.push(OTok::V(l.clone())),
        }
    }
    v
}

/// Scores by collecting per-class sequences first, then crediting each class
/// separately.
fn oracle_stt(prompt: &[RichSegment], hyp: &[RichSegment], conf: &[f64], w_spk: f64, w_tag: f64) -> f64 {
    let p = otoks(prompt);
    let h = otoks(hyp);
    let pick = |toks: &[OTok], class: u8| -> Vec<usize> {
        (0..toks.len())
            .filter(|&i| matches!((&toks[i], class), (OTok::W(_), 0) | (OTok::S(_), 1) | (OTok::V(_), 2)))
            .collect()
    };
    let mut mass = 0.0;
    let mut credit = 0.0;
    for (class, weight) in [(0u8, 1.0), (1, w_spk), (2, w_tag)] {
        let pi = pick(&p, class);
        let hi = pick(&h, class);
        mass += weight * pi.len() as f64;
        if class < 2 {
            for j in 0..pi.len() {
                if j < hi.len() && p[pi[j]] == h[hi[j]] {
                    credit += weight * conf[hi[j]];
                }
            }
        } else {
            let mut next = 0;
            for &pj in &pi {
                let mut k = next;
                while k < hi.len() && h[hi[k]] != p[pj] {
                    k += 1;
                }
                if k < hi.len() {
                    credit += weight * conf[hi[k]];
                    next = k + 1;
                }
            }
        }
    }
    credit / mass
}

// ---- generators -------------------------------------------------------------

fn logps(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| -rng.random_range(0.0..12.0f64) * rng.random::<f64>()).collect()
}

fn perturb(rng: &mut ChaCha8Rng, base: &[f64]) -> Vec<f64> {
    let scale = [1e-6, 1e-3, 0.1, 1.0, 4.0][rng.random_range(0..5)];
    base.iter().map(|&x| (x + scale * rng.random_range(-1.0..1.0)).min(0.0)).collect()
}

fn rich(rng: &mut ChaCha8Rng) -> Vec<RichSegment> {
    const WORDS: [&str; 6] = ["hi", "there", "the", "cat", "sat", "down"];
    const TAGS: [&str; 3] = ["laugh", "sigh", "in a hurry"];
    let mut out = Vec::new();
    for _ in 0..rng.random_range(1..8) {
        match rng.random_range(0..4) {
            0 => out.push(RichSegment::Speaker(rng.random_range(0..3))),
            1 => out.push(RichSegment::Vocal(TAGS[rng.random_range(0..3)].to_string())),
            _ => out.push(RichSegment::Words(
                (0..rng.random_range(1..5)).map(|_| WORDS[rng.random_range(0..6)].to_string()).collect(),
            )),
        }
    }
    out
}

fn corrupt(rng: &mut ChaCha8Rng, segs: &[RichSegment]) -> Vec<RichSegment> {
    let mut out: Vec<RichSegment> = segs.to_vec();
    for _ in 0..rng.random_range(0..3) {
        if out.is_empty() {
            break;
        }
        let i = rng.random_range(0..out.len());
        match rng.random_range(0..3) {
            0 => {
                out.remove(i);
            }
            1 => out[i] = RichSegment::Speaker(rng.random_range(0..3)),
            _ => out.insert(i, RichSegment::Vocal("laugh".into())),
        }
    }
    out
}

// ---- checks -----------------------------------------------------------------

fn check_loss_slow(rng: &mut ChaCha8Rng, cases: usize) -> CheckRow {
    let mut tr = Tracker::new("loss_slow");
    for c in 0..cases {
        let t = rng.random_range(0..64);
        let logp = logps(rng, t);
        let mask: Vec<f64> = (0..t).map(|_| if rng.random_bool(0.8) { 1.0 } else { 0.0 }).collect();
        let lambda: Vec<f64> = (0..t).map(|_| rng.random_range(0.01..3.0)).collect();
        let want = oracle_loss_slow(&logp, &mask, &lambda);
        let s = SlowLogProbs::new(logp.clone(), mask.clone(), lambda.clone()).expect("valid input");
        tr.compare(c, loss_slow(&s).expect("kernel"), want);
        // Linear in the per-token weights; zero when fully masked.
        let doubled = SlowLogProbs::new(logp.clone(), mask, lambda.iter().map(|l| 2.0 * l).collect()).expect("valid");
        tr.compare(c, loss_slow(&doubled).expect("kernel"), 2.0 * want);
        let masked = SlowLogProbs::new(logp, vec![0.0; t], lambda).expect("valid");
        tr.require(c, loss_slow(&masked).expect("kernel") == 0.0, "fully masked loss is not 0");
    }
    tr.done(cases)
}

fn check_loss_fast(rng: &mut ChaCha8Rng, cases: usize) -> Vec<CheckRow> {
    let mut pre = Tracker::new("loss_fast_pretrain");
    let mut sft = Tracker::new("loss_fast_sft");
    let mut given = Tracker::new("loss_fast_weighted");
    for c in 0..cases {
        let t = rng.random_range(1..24);
        let n = rng.random_range(2..12);
        let logp = logps(rng, t * n);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0)).collect();
        let f = FastLogProbs::new(LogProbGrid::new(t, n, logp.clone()).expect("grid"), w.clone()).expect("valid");

        pre.compare(c, loss_fast(&f, FastLossMode::Pretrain).expect("kernel"), oracle_loss_fast(t, n, &logp, &vec![1.0; n]));

        let decay: f64 = rng.random_range(0.1..1.0);
        let mut sw = vec![0.0; n];
        let mut p = 1.0;
        for wk in sw.iter_mut().skip(1) {
            *wk = p;
            p *= decay;
        }
        sft.compare(c, loss_fast(&f, FastLossMode::Sft { decay }).expect("kernel"), oracle_loss_fast(t, n, &logp, &sw));
        // The semantic column must not matter in SFT mode.
        let mut shifted = logp.clone();
        for row in 0..t {
            shifted[row * n] = -rng.random_range(0.0..50.0);
        }
        let f2 = FastLogProbs::new(LogProbGrid::new(t, n, shifted).expect("grid"), w.clone()).expect("valid");
        sft.require(
            c,
            loss_fast(&f2, FastLossMode::Sft { decay }).expect("kernel") == loss_fast(&f, FastLossMode::Sft { decay }).expect("kernel"),
            "SFT loss depends on the semantic column",
        );

        given.compare(c, loss_fast(&f, FastLossMode::Given).expect("kernel"), oracle_loss_fast(t, n, &logp, &w));
    }
    vec![pre.done(cases), sft.done(cases), given.done(cases)]
}

fn check_loss_total(rng: &mut ChaCha8Rng, cases: usize) -> CheckRow {
    let mut tr = Tracker::new("loss_total");
    for c in 0..cases {
        let (ls, lf) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        let w = LossWeights { lambda_slow: rng.random_range(0.0..2.0), lambda_fast: rng.random_range(0.0..2.0), beta: 0.0, gamma: 0.0 };
        tr.compare(c, loss_total(ls, lf, &w), w.lambda_slow * ls + w.lambda_fast * lf);
        let only_slow = LossWeights { lambda_slow: 1.0, lambda_fast: 0.0, ..w };
        tr.require(c, loss_total(ls, lf, &only_slow) == ls, "weights (1,0) do not isolate the slow loss");
    }
    tr.done(cases)
}

fn check_advantages(rng: &mut ChaCha8Rng, cases: usize) -> Vec<CheckRow> {
    let mut vals = Tracker::new("grpo_advantages");
    let mut sum0 = Tracker::new("advantage_sum_zero");
    let mut scale = Tracker::new("advantage_scale_no_std");
    let mut shift = Tracker::new("advantage_shift_exact");
    for c in 0..cases {
        let g: usize = rng.random_range(2..33);
        let r: Vec<f64> = (0..g).map(|_| rng.random_range(-5.0..5.0)).collect();
        let a = grpo_advantages(&r).expect("kernel");
        for (x, y) in a.iter().zip(oracle_advantages(&r)) {
            vals.compare(c, *x, y);
        }
        let max_r = r.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let s: f64 = a.iter().sum();
        sum0.require(c, s.abs() < 1e-12 * g as f64 * max_r.max(f64::MIN_POSITIVE), "sum of advantages not 0");

        // Power-of-two scaling is exact in binary floating point, so a
        // std-normalized variant (invariant to scaling) cannot pass this.
        let k = [0.25, 0.5, 2.0, 4.0, 1024.0][rng.random_range(0..5)];
        let scaled: Vec<f64> = r.iter().map(|x| x * k).collect();
        let as_ = grpo_advantages(&scaled).expect("kernel");
        scale.require(c, as_.iter().zip(&a).all(|(x, y)| *x == y * k), "advantages do not scale exactly with rewards");
        let kc: f64 = rng.random_range(0.1..10.0);
        let general: Vec<f64> = r.iter().map(|x| x * kc).collect();
        for (x, y) in grpo_advantages(&general).expect("kernel").iter().zip(&a) {
            scale.compare(c, *x, y * kc);
        }

        // Dyadic rewards and shifts keep every sum exact.
        let dy: Vec<f64> = (0..g).map(|_| rng.random_range(-4096i32..4096) as f64 / 1024.0).collect();
        let sh = rng.random_range(-4096i32..4096) as f64 / 1024.0;
        let base = grpo_advantages(&dy).expect("kernel");
        let moved = grpo_advantages(&dy.iter().map(|x| x + sh).collect::<Vec<_>>()).expect("kernel");
        if g.is_power_of_two() {
            shift.require(c, base == moved, "advantages change under a constant shift");
        } else {
            for (x, y) in moved.iter().zip(&base) {
                shift.compare(c, *x, *y);
            }
        }
    }
    let constant = grpo_advantages(&[0.7; 5]).expect("kernel");
    vals.require(cases, constant.iter().all(|&x| x == 0.0), "constant rewards give nonzero advantages");
    vals.require(cases, grpo_advantages(&[1.0]).is_err(), "G = 1 accepted");
    vec![vals.done(cases), sum0.done(cases), scale.done(cases), shift.done(cases)]
}

fn check_kl_elementwise(rng: &mut ChaCha8Rng, cases: usize) -> CheckRow {
    let mut tr = Tracker::new("kl_schulman");
    for c in 0..cases {
        let n = rng.random_range(1..64);
        let cur = logps(rng, n);
        let rf = perturb(rng, &cur);
        let got = kl_schulman(&cur, &rf).expect("kernel");
        for i in 0..n {
            tr.compare(c, got[i], oracle_k3(cur[i], rf[i]));
        }
        tr.require(c, kl_schulman(&cur, &cur).expect("kernel").iter().all(|&x| x == 0.0), "identical policies give nonzero KL");
    }
    tr.done(cases)
}

fn random_simplex(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..1.0f64)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

/// Expectation of the estimator under the current policy, by enumeration,
/// against the closed-form KL(cur || ref).
fn check_kl_enumeration(rng: &mut ChaCha8Rng, pairs: usize) -> CheckRow {
    let mut tr = Tracker::new("kl_enumeration");
    let mut cases = 0;
    // Worked example: [0.5, 0.5] vs [0.25, 0.75].
    let fixed = [(vec![0.5, 0.5], vec![0.25, 0.75])];
    let random: Vec<(Vec<f64>, Vec<f64>)> = (0..pairs)
        .map(|_| {
            let n = rng.random_range(2..=8);
            (random_simplex(rng, n), random_simplex(rng, n))
        })
        .collect();
    for (p, q) in fixed.iter().chain(&random) {
        let lp: Vec<f64> = p.iter().map(|x| x.ln()).collect();
        let lq: Vec<f64> = q.iter().map(|x| x.ln()).collect();
        let est = kl_schulman(&lp, &lq).expect("kernel");
        let mut expectation = 0.0;
        let mut exact = 0.0;
        for i in 0..p.len() {
            expectation += p[i] * est[i];
            exact += p[i] * (p[i] / q[i]).ln();
        }
        tr.compare(cases, expectation, exact);
        cases += 1;
    }
    let worked = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
    tr.require(0, (worked - 0.143841036).abs() < 1e-9, "worked example constant");
    tr.done(cases)
}

fn check_kl_nonneg(rng: &mut ChaCha8Rng, samples: usize) -> CheckRow {
    let mut tr = Tracker::new("kl_nonnegative");
    for c in 0..samples {
        let cur = -rng.random_range(0.0..40.0f64);
        let rf = -rng.random_range(0.0..40.0f64);
        let k = kl_schulman(&[cur], &[rf]).expect("kernel")[0];
        tr.require(c, k >= 0.0 && k.is_finite(), "negative or non-finite estimate");
        tr.require(c, (k == 0.0) == (cur == rf) || (cur - rf).abs() < 1e-7, "zero estimate for distinct log-probs");
    }
    tr.done(samples)
}

fn candidate(rng: &mut ChaCha8Rng, t: usize, n: usize) -> CandidateLogProbs<f64> {
    let slow = logps(rng, t);
    let slow_ref = perturb(rng, &slow);
    let fast = logps(rng, t * n);
    let fast_ref = perturb(rng, &fast);
    CandidateLogProbs {
        slow,
        slow_ref,
        fast: LogProbGrid::new(t, n, fast).expect("grid"),
        fast_ref: LogProbGrid::new(t, n, fast_ref).expect("grid"),
    }
}

fn check_rl(rng: &mut ChaCha8Rng, cases: usize) -> Vec<CheckRow> {
    let mut slow = Tracker::new("rl_loss_slow");
    let mut fast = Tracker::new("rl_loss_fast_codebook_size");
    let mut fast_tok = Tracker::new("rl_loss_fast_token_count");
    let mut total = Tracker::new("rl_loss_total");
    for c in 0..cases {
        let g = rng.random_range(2..9);
        let t = rng.random_range(1..32);
        let n = rng.random_range(2..11);
        let sizes: Vec<usize> = (1..n).map(|_| rng.random_range(2..4096)).collect();
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cands = (0..g).map(|_| candidate(rng, t, n)).collect();
        let group = GroupRollout::new(rewards, cands).expect("group");
        let beta = rng.random_range(0.0..0.5);
        let gamma = rng.random_range(0.0..2.0);
        let i = rng.random_range(0..g);
        let a = group.advantages[i];
        let cd = &group.candidates[i];
        let ls = rl_loss_slow(&group, i, beta).expect("kernel");
        slow.compare(c, ls, oracle_rl_slow(a, &cd.slow, &cd.slow_ref, beta));
        let lf = rl_loss_fast(&group, i, beta, &sizes, FastRlNorm::CodebookSize).expect("kernel");
        fast.compare(c, lf, oracle_rl_fast(a, t, n, &cd.fast.data, &cd.fast_ref.data, beta, &sizes, true));
        let lt = rl_loss_fast(&group, i, beta, &sizes, FastRlNorm::TokenCount).expect("kernel");
        fast_tok.compare(c, lt, oracle_rl_fast(a, t, n, &cd.fast.data, &cd.fast_ref.data, beta, &sizes, false));
        total.compare(c, rl_loss_total(ls, lf, gamma), ls + gamma * lf);
        total.require(c, rl_loss_total(ls, lf, 0.0) == ls, "gamma = 0 does not reduce to the slow loss");

        // beta = 0 reduces to -A * mean(logp).
        let mean: f64 = cd.slow.iter().sum::<f64>() / t as f64;
        slow.compare(c, rl_loss_slow(&group, i, 0.0).expect("kernel"), -a * mean);
    }
    vec![slow.done(cases), fast.done(cases), fast_tok.done(cases), total.done(cases)]
}

fn check_reward_fuse(rng: &mut ChaCha8Rng, cases: usize) -> CheckRow {
    let mut tr = Tracker::new("reward_fuse");
    for c in 0..cases {
        let w = RewardWeights { stt: rng.random_range(0.0..1.0), pref: rng.random_range(0.0..1.0), sim: rng.random_range(0.0..1.0) };
        let (a, b, d) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        tr.compare(c, reward_fuse(a, b, d, &w), w.stt * a + w.pref * b + w.sim * d);
    }
    let ones = RewardWeights { stt: 1.0, pref: 1.0, sim: 1.0 };
    tr.require(cases, reward_fuse(0.5, 0.5, 0.5, &ones) == 1.5, "unit weights on 0.5 rewards");
    tr.done(cases)
}

fn check_sim(rng: &mut ChaCha8Rng, cases: usize) -> CheckRow {
    let mut tr = Tracker::new("sim_reward");
    for c in 0..cases {
        let d = rng.random_range(1..128);
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        tr.compare(c, sim_reward(&a, &b).expect("kernel"), oracle_cosine(&a, &b));
    }
    tr.require(cases, sim_reward(&[1.0, 0.0], &[0.0, 3.0]).expect("kernel") == 0.0, "orthogonal vectors");
    tr.require(cases, sim_reward(&[0.0, 0.0], &[1.0, 1.0]).is_err(), "zero vector accepted");
    tr.done(cases)
}

fn check_stt(rng: &mut ChaCha8Rng, cases: usize) -> CheckRow {
    let mut tr = Tracker::new("stt_reward_mock");
    let pen = SttPenalties::<f64>::default();
    for c in 0..cases {
        let prompt = rich(rng);
        let hyp = corrupt(rng, &prompt);
        let n = otoks(&hyp).len();
        let conf: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..=1.0)).collect();
        let got = stt_reward_mock(&prompt, &hyp, &conf, &pen).expect("kernel");
        tr.compare(c, got, oracle_stt(&prompt, &hyp, &conf, pen.speaker, pen.vocal));
        tr.require(c, (0.0..=1.0).contains(&got), "reward outside [0, 1]");
    }
    tr.done(cases)
}

pub fn run(cfg: &CheckConfig) -> CheckReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = vec![check_loss_slow(&mut rng, cfg.cases)];
    rows.extend(check_loss_fast(&mut rng, cfg.cases));
    rows.push(check_loss_total(&mut rng, cfg.cases));
    rows.extend(check_advantages(&mut rng, cfg.cases));
    rows.push(check_kl_elementwise(&mut rng, cfg.cases));
    rows.push(check_kl_enumeration(&mut rng, cfg.kl_pairs));
    rows.push(check_kl_nonneg(&mut rng, cfg.kl_samples));
    rows.extend(check_rl(&mut rng, cfg.cases));
    rows.push(check_reward_fuse(&mut rng, cfg.cases));
    rows.push(check_sim(&mut rng, cfg.cases));
    rows.push(check_stt(&mut rng, cfg.cases));
    CheckReport { rows, elapsed_ms: start.elapsed().as_secs_f64() * 1e3 }
}
