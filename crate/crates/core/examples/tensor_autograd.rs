//! The tape-based autograd engine on its own: a small conv/PReLU/pool graph and its gradients.
//!
//! ```text
//! cargo run --release --example tensor_autograd
//! ```

use jcrnet::{Tape, Tensor};

fn main() -> jcrnet::Result<()> {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64([1, 1, 3, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.7, 0.8, 0.9])?.with_requires_grad(true))?;
    let taps: Vec<f64> = (0..18).map(|i| if i < 9 { 0.5 } else { -0.5 }).collect();
    let w = tape.leaf(Tensor::from_f64([2, 1, 3, 3], &taps)?.with_requires_grad(true))?;
    let slope = tape.leaf(Tensor::from_f64([1], &[0.25])?.with_requires_grad(true))?;

    let y = x.conv2d(w, None, 1, 1)?.prelu(slope)?.global_avg_pool()?;
    let loss = y.square()?.sum()?;
    println!("pooled {:?}", y.value().data());
    println!("loss {:.6}", loss.value().item());

    let grads = loss.backward()?;
    println!("dL/dx {:?}", grads.get(x).expect("x on the path"));
    println!("dL/dslope {:?}", grads.get(slope).expect("slope on the path"));
    Ok(())
}
