use std::time::Instant;

use msfcn::ops::conv::{conv2d_backward, conv2d_forward, Conv2dParams};
use msfcn::tensor::{Shape, Tensor};

fn main() {
    let p = Conv2dParams {
        stride: 1,
        pad: 1,
        groups: 1,
    };
    for &(c, hw) in &[(64usize, 108usize), (128, 54), (256, 27)] {
        let x = Tensor::<f32>::from_fn(Shape::new(2, c, hw, hw), |_, c, h, w| {
            ((c + h * 3 + w) % 7) as f32 * 0.1
        });
        let w = Tensor::<f32>::full(Shape::new(c, c, 3, 3), 0.01);
        let t = Instant::now();
        let y = conv2d_forward(&x, &w, None, p).unwrap();
        let fwd = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let _ = conv2d_backward(&x, &w, false, p, &y).unwrap();
        let bwd = t.elapsed().as_secs_f64();
        let gflop = 2.0 * 2.0 * (hw * hw * c * c * 9) as f64 / 1e9;
        println!(
            "c={c} hw={hw}: fwd {fwd:.3}s ({:.1} GFLOP/s) bwd {bwd:.3}s ({:.1} GFLOP/s)",
            gflop / fwd,
            2.0 * gflop / bwd
        );
    }
}
