//! Records a small conv → relu → pool → softmax graph, backpropagates, and
//! compares one weight's gradient with a central difference.

use mitos_rcnn::tensor::{Tape, Tensor, Var};

fn loss(x: &Tensor, w: &Tensor) -> (Tape, [Var; 2], f64) {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.leaf(w.clone().with_requires_grad(true));
    let c = tape.conv2d(xv, wv, None, 1, 1).unwrap();
    let r = tape.relu(c);
    let p = tape.maxpool2d(r, 2, 2).unwrap();
    let flat = tape.reshape(p, &[1, 2 * 3 * 3]).unwrap();
    let probs = tape.softmax(flat).unwrap();
    let ce = tape.cross_entropy(probs, &[4]).unwrap();
    let v = tape.value(ce).item();
    (tape, [wv, ce], v)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::new(vec![1, 6, 6], (0..36).map(|i| ((i * 7) % 11) as f64 / 10.0).collect())?;
    let w = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|i| ((i * 5) % 7) as f64 / 7.0 - 0.4).collect())?;

    let (mut tape, [wv, ce], value) = loss(&x, &w);
    let grads = tape.backward(ce)?;
    let g = grads.get(wv).expect("weight gradient");
    println!("loss {:.6}, ops run backward: {:?}", value, grads.visit_order());

    let h = 1e-5;
    for k in [0, 4, 13] {
        let (mut up, mut down) = (w.clone(), w.clone());
        up.data_mut()[k] += h;
        down.data_mut()[k] -= h;
        let numeric = (loss(&x, &up).2 - loss(&x, &down).2) / (2.0 * h);
        println!("w[{:2}]  analytic {:+.8}  numeric {:+.8}", k, g[k], numeric);
    }
    Ok(())
}
