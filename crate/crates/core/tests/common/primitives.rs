//! Finite-difference checks for every differentiable primitive.

use std::sync::Arc;

use deep_glr::graph::{EdgeWeightsOp, GlrOp, LaplacianOp};
use deep_glr::numerics::{Tensor, DEFAULT_EPS_NORM};
use deep_glr::projector::{Geometry, RayAdjointOp, RayTransformOp};
use deep_glr::Projector;
use rand::Rng;

use super::{fd_check, project_to_scalar, rng, uniform, uniform_away_from_zero, FdReport};

type Check = (&'static str, fn() -> FdReport);

pub const CHECKS: &[Check] = &[
    ("add", add),
    ("sub", sub),
    ("mul", mul),
    ("scale", scale),
    ("offset", offset),
    ("mul_scalar", mul_scalar),
    ("square", square),
    ("relu", relu),
    ("sigmoid", sigmoid),
    ("bounded_sigmoid", bounded_sigmoid),
    ("exp", exp),
    ("sum", sum),
    ("mean", mean),
    ("dot", dot),
    ("reshape", reshape),
    ("conv2d", conv2d),
    ("conv2d_k5", conv2d_k5),
    ("spatial_norm", spatial_norm),
    ("global_avg_pool", global_avg_pool),
    ("affine", affine),
    ("composite exp(sum(sigmoid(Wx)))", composite),
    ("edge_weights", edge_weights),
    ("laplacian", laplacian),
    ("glr_value", glr_value),
    ("ray_transform", ray_transform),
    ("ray_adjoint", ray_adjoint),
];

fn add() -> FdReport {
    let mut r = rng(1);
    let ins = [uniform(&[2, 3, 3], &mut r), uniform(&[2, 3, 3], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.add(v[0], v[1])?;
        project_to_scalar(t, o, 11)
    })
}

fn sub() -> FdReport {
    let mut r = rng(2);
    let ins = [uniform(&[5], &mut r), uniform(&[5], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.sub(v[0], v[1])?;
        project_to_scalar(t, o, 12)
    })
}

fn mul() -> FdReport {
    let mut r = rng(3);
    let ins = [uniform(&[2, 4, 4], &mut r), uniform(&[2, 4, 4], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.mul(v[0], v[1])?;
        project_to_scalar(t, o, 13)
    })
}

fn scale() -> FdReport {
    let mut r = rng(4);
    let ins = [uniform(&[7], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.scale(v[0], -2.5);
        project_to_scalar(t, o, 14)
    })
}

fn offset() -> FdReport {
    let mut r = rng(5);
    let ins = [uniform(&[7], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.offset(v[0], 0.75);
        let o = t.square(o);
        project_to_scalar(t, o, 15)
    })
}

fn mul_scalar() -> FdReport {
    let mut r = rng(6);
    let ins = [uniform(&[1, 5, 5], &mut r), uniform(&[1], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.mul_scalar(v[0], v[1])?;
        project_to_scalar(t, o, 16)
    })
}

fn square() -> FdReport {
    let mut r = rng(7);
    let ins = [uniform(&[3, 3], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.square(v[0]);
        project_to_scalar(t, o, 17)
    })
}

fn relu() -> FdReport {
    let mut r = rng(8);
    let ins = [uniform_away_from_zero(&[2, 5, 5], 1e-3, &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.relu(v[0]);
        project_to_scalar(t, o, 18)
    })
}

fn sigmoid() -> FdReport {
    let mut r = rng(9);
    let ins = [uniform(&[2, 5, 5], &mut r).map(|x| 4.0 * x)];
    fd_check(&ins, |t, v| {
        let o = t.sigmoid(v[0]);
        project_to_scalar(t, o, 19)
    })
}

fn bounded_sigmoid() -> FdReport {
    let mut r = rng(30);
    let ins = [uniform(&[6], &mut r).map(|x| 3.0 * x)];
    fd_check(&ins, |t, v| {
        let o = t.bounded_sigmoid(v[0], 1.0, 1.5);
        project_to_scalar(t, o, 36)
    })
}

fn exp() -> FdReport {
    let mut r = rng(10);
    let ins = [uniform(&[9], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.exp(v[0]);
        project_to_scalar(t, o, 20)
    })
}

fn sum() -> FdReport {
    let mut r = rng(11);
    let ins = [uniform(&[2, 3, 4], &mut r)];
    fd_check(&ins, |t, v| {
        let s = t.square(v[0]);
        Ok(t.sum(s))
    })
}

fn mean() -> FdReport {
    let mut r = rng(12);
    let ins = [uniform(&[2, 3, 4], &mut r)];
    fd_check(&ins, |t, v| {
        let s = t.exp(v[0]);
        Ok(t.mean(s))
    })
}

fn dot() -> FdReport {
    let mut r = rng(13);
    let ins = [uniform(&[3, 4], &mut r), uniform(&[3, 4], &mut r)];
    fd_check(&ins, |t, v| t.dot(v[0], v[1]))
}

fn reshape() -> FdReport {
    let mut r = rng(14);
    let ins = [uniform(&[2, 6], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.reshape(v[0], &[3, 2, 2])?;
        let o = t.square(o);
        project_to_scalar(t, o, 24)
    })
}

fn conv2d() -> FdReport {
    let mut r = rng(15);
    let ins = [
        uniform(&[2, 8, 8], &mut r),
        uniform(&[3, 2, 3, 3], &mut r),
        uniform(&[3], &mut r),
    ];
    fd_check(&ins, |t, v| {
        let o = t.conv2d(v[0], v[1], v[2])?;
        project_to_scalar(t, o, 25)
    })
}

fn conv2d_k5() -> FdReport {
    let mut r = rng(16);
    let ins = [
        uniform(&[1, 6, 7], &mut r),
        uniform(&[2, 1, 5, 5], &mut r),
        uniform(&[2], &mut r),
    ];
    fd_check(&ins, |t, v| {
        let o = t.conv2d(v[0], v[1], v[2])?;
        project_to_scalar(t, o, 26)
    })
}

fn spatial_norm() -> FdReport {
    let mut r = rng(17);
    let ins = [
        uniform(&[3, 6, 6], &mut r),
        uniform(&[3], &mut r),
        uniform(&[3], &mut r),
    ];
    fd_check(&ins, |t, v| {
        let o = t.spatial_norm(v[0], v[1], v[2], DEFAULT_EPS_NORM)?;
        project_to_scalar(t, o, 27)
    })
}

fn global_avg_pool() -> FdReport {
    let mut r = rng(18);
    let ins = [uniform(&[4, 5, 3], &mut r)];
    fd_check(&ins, |t, v| {
        let o = t.global_avg_pool(v[0])?;
        let o = t.square(o);
        project_to_scalar(t, o, 28)
    })
}

fn affine() -> FdReport {
    let mut r = rng(19);
    let ins = [
        uniform(&[5], &mut r),
        uniform(&[3, 5], &mut r),
        uniform(&[3], &mut r),
    ];
    fd_check(&ins, |t, v| {
        let o = t.affine(v[0], v[1], v[2])?;
        project_to_scalar(t, o, 29)
    })
}

fn composite() -> FdReport {
    let mut r = rng(20);
    let ins = [uniform(&[4, 4], &mut r), uniform(&[4], &mut r)];
    fd_check(&ins, |t, v| {
        let b = t.constant(Tensor::zeros(&[4]));
        let wx = t.affine(v[1], v[0], b)?;
        let s = t.sigmoid(wx);
        let s = t.sum(s);
        Ok(t.exp(s))
    })
}

fn edge_weights() -> FdReport {
    let mut r = rng(21);
    let f = uniform(&[3, 5, 4], &mut r);
    let eps = Tensor::scalar(r.gen_range(1.0..1.5));
    fd_check(&[f, eps], |t, v| {
        let o = t.custom(Box::new(EdgeWeightsOp), &[v[0], v[1]])?;
        project_to_scalar(t, o, 31)
    })
}

fn laplacian() -> FdReport {
    let mut r = rng(22);
    let w = Tensor::from_fn(&[8, 5, 5], |_| r.gen_range(0.0..1.0));
    let x = uniform(&[1, 5, 5], &mut r);
    fd_check(&[w, x], |t, v| {
        let o = t.custom(Box::new(LaplacianOp), &[v[0], v[1]])?;
        project_to_scalar(t, o, 32)
    })
}

/// The composite regularizer: weights built from features, then `x^T L x`.
fn glr_value() -> FdReport {
    let mut r = rng(23);
    let f = uniform(&[3, 5, 5], &mut r);
    let eps = Tensor::scalar(1.25);
    let x = uniform(&[1, 5, 5], &mut r);
    fd_check(&[f, eps, x], |t, v| {
        let w = t.custom(Box::new(EdgeWeightsOp), &[v[0], v[1]])?;
        t.custom(Box::new(GlrOp), &[w, v[2]])
    })
}

fn small_projector() -> Arc<Projector> {
    Arc::new(Projector::new(Geometry::new(6, 5.0, 5, 9).unwrap()).unwrap())
}

fn ray_transform() -> FdReport {
    let p = small_projector();
    let mut r = rng(24);
    let x = uniform(&[1, 6, 6], &mut r);
    fd_check(&[x], |t, v| {
        let o = t.custom(
            Box::new(RayTransformOp {
                projector: Arc::clone(&p),
                scale: 0.3,
            }),
            &[v[0]],
        )?;
        let o = t.square(o);
        project_to_scalar(t, o, 34)
    })
}

fn ray_adjoint() -> FdReport {
    let p = small_projector();
    let mut r = rng(25);
    let y = uniform(&[5, 9], &mut r);
    fd_check(&[y], |t, v| {
        let o = t.custom(
            Box::new(RayAdjointOp {
                projector: Arc::clone(&p),
                scale: 1.7,
            }),
            &[v[0]],
        )?;
        let o = t.square(o);
        project_to_scalar(t, o, 35)
    })
}
