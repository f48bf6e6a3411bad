//! Seeded finite-difference certification of every tape primitive.
//!
//! Each case builds random inputs, applies one primitive and contracts the
//! result with fixed random weights so all output coordinates contribute.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{gradient_check, GradCheckReport, PRIMITIVE_TOL};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

pub const DEFAULT_INSTANCES: u64 = 10;

type MakeFn = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type OpFn = Box<dyn Fn(&Tape<f64>, &[Var]) -> Result<Var>>;

pub struct Case {
    pub name: String,
    make: MakeFn,
    op: OpFn,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> + 'static,
        op: impl Fn(&Tape<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            make: Box::new(make),
            op: Box::new(op),
        }
    }

    /// Checks `instances` independent random draws.
    pub fn run(&self, instances: u64) -> Result<Vec<GradCheckReport>> {
        (0..instances)
            .map(|k| {
                let mut r = case_rng(&self.name, k);
                let inputs = (self.make)(&mut r);
                gradient_check(
                    &self.name,
                    |t, v| {
                        let y = (self.op)(t, v)?;
                        project(t, y, 1000 + k)
                    },
                    &inputs,
                    PRIMITIVE_TOL,
                )
            })
            .collect()
    }
}

/// Deterministic per-case stream: FNV-1a of the name mixed with the instance.
pub fn case_rng(tag: &str, k: u64) -> ChaCha8Rng {
    let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(h ^ k)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| r.gen_range(lo..hi))
}

/// Values with magnitude in `[0.1, 2]` and random sign, away from kinks at 0.
pub fn off_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = r.gen_range(0.1..2.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y * w)` with `w` drawn from `seed`.
pub fn project(t: &Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = t.constant(uniform(&mut r, &shape, -1.0, 1.0));
    let p = t.mul(y, w)?;
    t.sum_all(p)
}

/// Pixel coordinates whose fractional offset from the sampling lattice stays
/// away from cell boundaries, where the interpolant has kinks.
fn coords(r: &mut ChaCha8Rng, q: usize, w: usize, h: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![q, 2], |i| {
        let n = if i % 2 == 0 { w } else { h };
        // lattice cell index from -1 (left padding) to n-1 (right padding)
        let cell = r.gen_range(-1..n as i64) as f64;
        cell + 0.5 + r.gen_range(0.05..0.95)
    })
}

fn one(shape: &'static [usize], lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    move |r| vec![uniform(r, shape, lo, hi)]
}

fn many(shapes: &'static [&'static [usize]]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    move |r| shapes.iter().map(|s| uniform(r, s, -1.0, 1.0)).collect()
}

/// Every primitive the models use, with inputs kept away from kinks.
pub fn primitive_cases() -> Vec<Case> {
    let mut c = Vec::new();
    let pairs: [(&'static [usize], &'static [usize]); 3] =
        [(&[3, 4], &[3, 4]), (&[2, 3, 4], &[4]), (&[3, 1], &[1, 5])];
    for (i, (sa, sb)) in pairs.into_iter().enumerate() {
        let mk = move |r: &mut ChaCha8Rng| vec![uniform(r, sa, -2.0, 2.0), off_zero(r, sb)];
        c.push(Case::new(format!("add{i}"), mk, |t, v| t.add(v[0], v[1])));
        c.push(Case::new(format!("sub{i}"), mk, |t, v| t.sub(v[0], v[1])));
        c.push(Case::new(format!("mul{i}"), mk, |t, v| t.mul(v[0], v[1])));
        c.push(Case::new(format!("div{i}"), mk, |t, v| t.div(v[0], v[1])));
    }
    c.push(Case::new(
        "maximum",
        |r| {
            let a = uniform(r, &[4, 5], -2.0, 2.0);
            // b differs from a by at least 0.05 everywhere
            let b = Tensor::from_fn(vec![4, 5], |i| {
                let d = r.gen_range(0.05..1.0);
                a.data()[i] + if r.gen_bool(0.5) { d } else { -d }
            });
            vec![a, b]
        },
        |t, v| t.maximum(v[0], v[1]),
    ));

    c.push(Case::new("neg", one(&[7], -3.0, 3.0), |t, v| t.neg(v[0])));
    c.push(Case::new("exp", one(&[7], -3.0, 3.0), |t, v| t.exp(v[0])));
    c.push(Case::new("sigmoid", one(&[7], -6.0, 6.0), |t, v| t.sigmoid(v[0])));
    c.push(Case::new("log_sigmoid", one(&[7], -30.0, 30.0), |t, v| t.log_sigmoid(v[0])));
    c.push(Case::new("relu", |r| vec![off_zero(r, &[9])], |t, v| t.relu(v[0])));
    c.push(Case::new("gelu", one(&[9], -4.0, 4.0), |t, v| t.gelu(v[0])));
    c.push(Case::new("tanh", one(&[9], -3.0, 3.0), |t, v| t.tanh(v[0])));
    c.push(Case::new("abs", |r| vec![off_zero(r, &[9])], |t, v| t.abs(v[0])));
    c.push(Case::new("square", one(&[5], -5.0, 5.0), |t, v| t.square(v[0])));
    c.push(Case::new("affine", one(&[5], -3.0, 3.0), |t, v| t.affine(v[0], -1.7, 0.3)));
    c.push(Case::new("scale", one(&[5], -3.0, 3.0), |t, v| t.scale(v[0], 2.5)));
    c.push(Case::new("add_scalar", one(&[5], -3.0, 3.0), |t, v| t.add_scalar(v[0], -0.7)));

    c.push(Case::new("sum_axis", one(&[3, 4, 5], -1.0, 1.0), |t, v| t.sum_axis(v[0], 1, false)));
    c.push(Case::new("sum_axis_keep", one(&[3, 4, 5], -1.0, 1.0), |t, v| t.sum_axis(v[0], 2, true)));
    c.push(Case::new("mean_axis", one(&[3, 4], -1.0, 1.0), |t, v| t.mean_axis(v[0], 0, false)));
    c.push(Case::new("sum_all", one(&[3, 4], -1.0, 1.0), |t, v| {
        let s = t.sum_all(v[0])?;
        t.mul(s, s)
    }));
    c.push(Case::new("mean_all", one(&[6], -1.0, 1.0), |t, v| {
        let s = t.mean_all(v[0])?;
        t.exp(s)
    }));

    c.push(Case::new("reshape", one(&[2, 6], -1.0, 1.0), |t, v| t.reshape(v[0], &[3, 4])));
    c.push(Case::new("permute", one(&[2, 3, 4], -1.0, 1.0), |t, v| t.permute(v[0], &[2, 0, 1])));
    c.push(Case::new("concat", many(&[&[2, 3, 2], &[2, 1, 2]]), |t, v| {
        t.concat(&[v[0], v[1], v[0]], 1)
    }));
    c.push(Case::new("slice", one(&[3, 6], -1.0, 1.0), |t, v| t.slice(v[0], 1, 2, 5)));
    c.push(Case::new("index_select", one(&[5, 3], -1.0, 1.0), |t, v| {
        t.index_select(v[0], &[4, 0, 4, 2])
    }));
    c.push(Case::new("scatter_rows", one(&[4, 3], -1.0, 1.0), |t, v| {
        t.scatter_rows(v[0], &[1, 3, 1, 0], 5)
    }));

    c.push(Case::new("matmul2d", many(&[&[3, 4], &[4, 5]]), |t, v| t.matmul(v[0], v[1])));
    c.push(Case::new("matmul_batched", many(&[&[2, 3, 4], &[2, 4, 2]]), |t, v| {
        t.matmul(v[0], v[1])
    }));
    c.push(Case::new("matmul_shared_rhs", many(&[&[2, 3, 4], &[4, 2]]), |t, v| {
        t.matmul(v[0], v[1])
    }));

    c.push(Case::new("conv2d_k3", many(&[&[2, 2, 4, 5], &[3, 2, 3, 3], &[3]]), |t, v| {
        t.conv2d(v[0], v[1], v[2])
    }));
    c.push(Case::new("conv2d_k1", many(&[&[1, 3, 3, 3], &[2, 3, 1, 1], &[2]]), |t, v| {
        t.conv2d(v[0], v[1], v[2])
    }));
    c.push(Case::new("conv3d_k3", many(&[&[2, 3, 4, 3], &[2, 2, 3, 3, 3], &[2]]), |t, v| {
        t.conv3d(v[0], v[1], v[2])
    }));
    c.push(Case::new("conv3d_k1", many(&[&[3, 2, 2, 3], &[2, 3, 1, 1, 1], &[2]]), |t, v| {
        t.conv3d(v[0], v[1], v[2])
    }));
    c.push(Case::new("pixel_shuffle", one(&[1, 8, 2, 3], -1.0, 1.0), |t, v| {
        t.pixel_shuffle(v[0], 2)
    }));

    c.push(Case::new("softmax_last", one(&[3, 5], -3.0, 3.0), |t, v| t.softmax(v[0], 1)));
    c.push(Case::new("softmax_middle", one(&[2, 4, 3], -3.0, 3.0), |t, v| t.softmax(v[0], 1)));
    c.push(Case::new("masked_softmax", one(&[3, 4], -3.0, 3.0), |t, v| {
        let mask = [
            true, false, true, true, false, false, false, false, true, true, false, true,
        ];
        t.masked_softmax(v[0], &mask)
    }));
    c.push(Case::new("normalize", one(&[4, 6], -2.0, 2.0), |t, v| t.normalize(v[0], 1, 1e-5)));
    c.push(Case::new("normalize_axis0", one(&[5, 3], -2.0, 2.0), |t, v| {
        t.normalize(v[0], 0, 1e-5)
    }));
    c.push(Case::new("l2norm", one(&[4, 3], -2.0, 2.0), |t, v| t.l2norm(v[0])));
    c.push(Case::new("exclusive_cumprod", one(&[3, 6], 0.05, 1.0), |t, v| {
        t.exclusive_cumprod(v[0])
    }));

    c.push(Case::new(
        "bilinear_sample",
        |r| vec![uniform(r, &[3, 2, 4, 5], -1.0, 1.0), coords(r, 5, 5, 4)],
        |t, v| t.bilinear_sample(v[0], v[1], &[0, 2, 1, 1, 0]),
    ));
    let pts: Vec<[f64; 3]> = (0..6)
        .map(|i| {
            let f = i as f64;
            [0.3 * f, 2.9 - 0.4 * f, (1.7 * f) % 3.0]
        })
        .chain([[-0.5, 1.0, 4.0]])
        .collect();
    let p2 = pts.clone();
    c.push(Case::new("trilinear_sample", one(&[3, 4, 4, 2], -1.0, 1.0), move |t, v| {
        t.trilinear_sample(v[0], &pts)
    }));
    c.push(Case::new("trilinear_gradient", one(&[3, 4, 4, 2], -1.0, 1.0), move |t, v| {
        t.trilinear_gradient(v[0], &p2)
    }));
    c
}

/// Runs every primitive case; one report per instance.
pub fn primitive_suite(instances: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for case in primitive_cases() {
        out.extend(case.run(instances)?);
    }
    Ok(out)
}
