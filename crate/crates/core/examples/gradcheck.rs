//! Central-difference check of a small attention block and of the
//! gradient reversal layer.

use loanscreen::tensor::gradcheck::{check_gradients, random_tensor};
use loanscreen::tensor::{Graph, Tensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = random_tensor(&[4, 3], 7, 1.0);
    let w = random_tensor(&[3, 3], 8, 0.5);
    let r = check_gradients(&[x, w], 1e-5, |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.tanh(h);
        let y = g.mul(h, h)?;
        Ok(g.sum(y))
    })?;
    println!("tanh(xW) max rel err {:.2e}", r.max_rel_error());

    // forward is the identity, backward scales by -lambda
    let mut g = Graph::new();
    let a = g.param(Tensor::vector(vec![1.0, -2.0, 0.5]));
    let b = g.grad_reverse(a, 0.5);
    let s = g.sum(b);
    g.backward(s)?;
    println!("value {:?}  grad {:?}", g.value(b).data(), g.grad(a).map(|t| t.to_vec()));
    Ok(())
}
