//! Scalar abstraction shared by the renderer and the optimizer.
//!
//! Every differentiable code path is written against [`Real`]. Plain `f64`
//! evaluates it directly; [`Var`] records the same computation on a
//! thread-local tape so that [`TapeSession::backward`] can return sparse parameter
//! gradients. Trainable parameters enter a computation only through
//! [`Real::lin`] and [`Real::param`], which look up the parameter block in
//! the [`ParamLayout`] installed by the active [`TapeSession`].

use std::cell::RefCell;
use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Range, Sub};

/// Identifies a block of trainable parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Sdf,
    LogBeta,
    Albedo,
    Roughness,
    Metallic,
    Emission,
    SgAmplitude,
    SgSharpness,
    SgAxis,
    LipschitzBound,
}

impl ParamKey {
    pub const COUNT: usize = 10;

    pub const ALL: [ParamKey; Self::COUNT] = [
        ParamKey::Sdf,
        ParamKey::LogBeta,
        ParamKey::Albedo,
        ParamKey::Roughness,
        ParamKey::Metallic,
        ParamKey::Emission,
        ParamKey::SgAmplitude,
        ParamKey::SgSharpness,
        ParamKey::SgAxis,
        ParamKey::LipschitzBound,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKey::Sdf => "sdf",
            ParamKey::LogBeta => "log_beta",
            ParamKey::Albedo => "albedo",
            ParamKey::Roughness => "roughness",
            ParamKey::Metallic => "metallic",
            ParamKey::Emission => "emission",
            ParamKey::SgAmplitude => "sg_amplitude",
            ParamKey::SgSharpness => "sg_sharpness",
            ParamKey::SgAxis => "sg_axis",
            ParamKey::LipschitzBound => "lipschitz_bound",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Maps parameter blocks onto one flat index space.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamLayout {
    blocks: Vec<(ParamKey, Range<usize>)>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, key: ParamKey, len: usize) {
        assert!(self.range(key).is_none(), "duplicate parameter block {key:?}");
        self.blocks.push((key, self.total..self.total + len));
        self.total += len;
    }

    pub fn range(&self, key: ParamKey) -> Option<Range<usize>> {
        self.blocks
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, r)| r.clone())
    }

    pub fn offset(&self, key: ParamKey) -> Option<usize> {
        self.range(key).map(|r| r.start)
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn blocks(&self) -> impl Iterator<Item = (ParamKey, Range<usize>)> + '_ {
        self.blocks.iter().cloned()
    }

    /// Block owning a flat index.
    pub fn key_of(&self, index: usize) -> Option<ParamKey> {
        self.blocks
            .iter()
            .find(|(_, r)| r.contains(&index))
            .map(|(k, _)| *k)
    }
}

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;

    fn exp(self) -> Self;
    fn exp_m1(self) -> Self;
    fn exp2(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn powf(self, e: f64) -> Self;
    fn recip(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;

    /// `Σ w · data[i]` over `terms`, tracked as parameters of block `key`.
    fn lin(key: ParamKey, data: &[f64], terms: &[(usize, f64)]) -> Self;

    /// A single parameter of block `key`.
    fn param(key: ParamKey, index: usize, value: f64) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    /// Larger of the two, selected by value.
    fn max_s(self, other: Self) -> Self {
        if self.val() >= other.val() {
            self
        } else {
            other
        }
    }

    fn min_s(self, other: Self) -> Self {
        if self.val() <= other.val() {
            self
        } else {
            other
        }
    }

    fn max_c(self, c: f64) -> Self {
        if self.val() >= c {
            self
        } else {
            Self::cst(c)
        }
    }

    fn min_c(self, c: f64) -> Self {
        if self.val() <= c {
            self
        } else {
            Self::cst(c)
        }
    }

    fn clamp_c(self, lo: f64, hi: f64) -> Self {
        self.max_c(lo).min_c(hi)
    }
}

pub fn sum<S: Real>(items: impl IntoIterator<Item = S>) -> S {
    items.into_iter().fold(S::zero(), |a, b| a + b)
}

fn stable_softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn val(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn exp_m1(self) -> Self {
        f64::exp_m1(self)
    }
    #[inline]
    fn exp2(self) -> Self {
        f64::exp2(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> Self {
        f64::abs(self)
    }
    #[inline]
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    #[inline]
    fn powf(self, e: f64) -> Self {
        f64::powf(self, e)
    }
    #[inline]
    fn recip(self) -> Self {
        f64::recip(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        logistic(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        stable_softplus(self)
    }
    #[inline]
    fn lin(_key: ParamKey, data: &[f64], terms: &[(usize, f64)]) -> Self {
        terms.iter().map(|&(i, w)| w * data[i]).sum()
    }
    #[inline]
    fn param(_key: ParamKey, _index: usize, value: f64) -> Self {
        value
    }
}

const CONST_ID: u32 = u32::MAX;

/// A scalar recorded on the thread-local tape.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    v: f64,
    id: u32,
}

#[derive(Default)]
struct Tape {
    active: bool,
    layout: ParamLayout,
    /// Exclusive end of each node's slice in `edges`.
    ends: Vec<u32>,
    edges: Vec<(u32, f64)>,
    /// (node, flat parameter index, partial)
    param_edges: Vec<(u32, u32, f64)>,
}

impl Tape {
    fn clear(&mut self) {
        self.ends.clear();
        self.edges.clear();
        self.param_edges.clear();
    }
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

/// Guard for one recording on the current thread's tape.
///
/// Recording starts empty; dropping the session clears the tape. Sessions do
/// not nest.
pub struct TapeSession {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl TapeSession {
    pub fn begin(layout: &ParamLayout) -> Self {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            assert!(!t.active, "tape sessions do not nest");
            t.clear();
            t.active = true;
            t.layout = layout.clone();
        });
        TapeSession {
            _not_send: std::marker::PhantomData,
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        TAPE.with(|t| t.borrow().ends.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse sweep from weighted outputs. Returns `(flat index, gradient)`
    /// pairs in recording order; an index may repeat.
    pub fn backward(&self, seeds: &[(Var, f64)]) -> Vec<(u32, f64)> {
        TAPE.with(|t| {
            let t = t.borrow();
            let n = t.ends.len();
            let mut adj = vec![0.0; n];
            for &(v, s) in seeds {
                if v.id != CONST_ID {
                    adj[v.id as usize] += s;
                }
            }
            for i in (0..n).rev() {
                let a = adj[i];
                if a == 0.0 {
                    continue;
                }
                let start = if i == 0 { 0 } else { t.ends[i - 1] as usize };
                let end = t.ends[i] as usize;
                for &(p, d) in &t.edges[start..end] {
                    adj[p as usize] += a * d;
                }
            }
            t.param_edges
                .iter()
                .filter_map(|&(node, p, d)| {
                    let a = adj[node as usize];
                    (a != 0.0).then_some((p, a * d))
                })
                .collect()
        })
    }

    /// Dense gradient of a single output.
    pub fn gradient(&self, output: Var, n_params: usize) -> Vec<f64> {
        let mut g = vec![0.0; n_params];
        for (p, d) in self.backward(&[(output, 1.0)]) {
            g[p as usize] += d;
        }
        g
    }
}

impl Drop for TapeSession {
    fn drop(&mut self) {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            t.active = false;
            t.clear();
        });
    }
}

impl Var {
    #[inline]
    pub fn constant(v: f64) -> Self {
        Var { v, id: CONST_ID }
    }

    pub fn is_tracked(self) -> bool {
        self.id != CONST_ID
    }

    #[inline]
    fn node(v: f64, parents: &[(Var, f64)]) -> Self {
        if parents.iter().all(|(p, _)| p.id == CONST_ID) {
            return Var::constant(v);
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            for &(p, d) in parents {
                if p.id != CONST_ID {
                    t.edges.push((p.id, d));
                }
            }
            let id = t.ends.len() as u32;
            let end = t.edges.len() as u32;
            t.ends.push(end);
            Var { v, id }
        })
    }

    #[inline]
    fn unary(self, v: f64, d: f64) -> Self {
        Var::node(v, &[(self, d)])
    }
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn val(self) -> f64 {
        self.v
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.unary(e, e)
    }
    fn exp_m1(self) -> Self {
        self.unary(self.v.exp_m1(), self.v.exp())
    }
    fn exp2(self) -> Self {
        let e = self.v.exp2();
        self.unary(e, e * std::f64::consts::LN_2)
    }
    fn ln(self) -> Self {
        self.unary(self.v.ln(), 1.0 / self.v)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn abs(self) -> Self {
        let d = if self.v >= 0.0 { 1.0 } else { -1.0 };
        self.unary(self.v.abs(), d)
    }
    fn powi(self, n: i32) -> Self {
        let d = if n == 0 {
            0.0
        } else {
            n as f64 * self.v.powi(n - 1)
        };
        self.unary(self.v.powi(n), d)
    }
    fn powf(self, e: f64) -> Self {
        self.unary(self.v.powf(e), e * self.v.powf(e - 1.0))
    }
    fn recip(self) -> Self {
        self.unary(1.0 / self.v, -1.0 / (self.v * self.v))
    }
    fn sigmoid(self) -> Self {
        let s = logistic(self.v);
        self.unary(s, s * (1.0 - s))
    }
    fn softplus(self) -> Self {
        self.unary(stable_softplus(self.v), logistic(self.v))
    }
    fn lin(key: ParamKey, data: &[f64], terms: &[(usize, f64)]) -> Self {
        let v: f64 = terms.iter().map(|&(i, w)| w * data[i]).sum();
        Var::leaf(key, v, terms)
    }
    fn param(key: ParamKey, index: usize, value: f64) -> Self {
        Var::leaf(key, value, &[(index, 1.0)])
    }
}

impl Var {
    fn leaf(key: ParamKey, v: f64, terms: &[(usize, f64)]) -> Self {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            if !t.active {
                return Var::constant(v);
            }
            let Some(offset) = t.layout.offset(key) else {
                return Var::constant(v);
            };
            let id = t.ends.len() as u32;
            let end = t.edges.len() as u32;
            t.ends.push(end);
            for &(i, w) in terms {
                t.param_edges.push((id, (offset + i) as u32, w));
            }
            Var { v, id }
        })
    }
}

impl Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: Var) -> Var {
        Var::node(self.v + o.v, &[(self, 1.0), (o, 1.0)])
    }
}

impl Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: Var) -> Var {
        Var::node(self.v - o.v, &[(self, 1.0), (o, -1.0)])
    }
}

impl Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: Var) -> Var {
        Var::node(self.v * o.v, &[(self, o.v), (o, self.v)])
    }
}

impl Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: Var) -> Var {
        let q = self.v / o.v;
        Var::node(q, &[(self, 1.0 / o.v), (o, -q / o.v)])
    }
}

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        self.unary(-self.v, -1.0)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, c: f64) -> Var {
        self.unary(self.v + c, 1.0)
    }
}

impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, c: f64) -> Var {
        self.unary(self.v - c, 1.0)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, c: f64) -> Var {
        self.unary(self.v * c, c)
    }
}

impl Div<f64> for Var {
    type Output = Var;
    #[inline]
    fn div(self, c: f64) -> Var {
        self.unary(self.v / c, 1.0 / c)
    }
}
