//! The tape-based tensor engine on its own: build a small expression,
//! run reverse mode, and compare one coordinate with a finite difference.

use cmformer::ndtensor::{Tape, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x0 = Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4])?;
    let w0 = Tensor::new(&[3, 2], vec![0.5, -0.3, 0.2, 0.9, -0.7, 0.4])?;

    let f = |x: &Tensor| -> Result<f64, Box<dyn std::error::Error>> {
        let tape = Tape::new();
        let x = tape.constant(x);
        let w = tape.constant(&w0);
        Ok(x.matmul(w)?.softmax_lastdim()?.log()?.mean()?.item())
    };

    let tape = Tape::new();
    let x = tape.leaf(&x0.clone().with_grad());
    let w = tape.leaf(&w0.clone().with_grad());
    let loss = x.matmul(w)?.softmax_lastdim()?.log()?.mean()?;
    println!("loss = {:.6}  ({} tape nodes)", loss.item(), tape.len());
    let grads = loss.backward()?;
    println!("dloss/dx = {:?}", grads.wrt(x).unwrap());
    println!("dloss/dw = {:?}", grads.wrt(w).unwrap());

    let eps = 1e-6;
    let (mut plus, mut minus) = (x0.clone(), x0.clone());
    plus.data_mut()[0] += eps;
    minus.data_mut()[0] -= eps;
    let numeric = (f(&plus)? - f(&minus)?) / (2.0 * eps);
    println!("x[0,0]: analytic {:.9}  central difference {:.9}", grads.wrt(x).unwrap()[0], numeric);
    Ok(())
}
