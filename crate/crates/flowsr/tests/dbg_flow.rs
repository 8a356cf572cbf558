#[test]
fn stagewise() {
    use flowsr::flow::*;
    use flowsr::nn::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    let randn = |shape: &[usize], seed: u64| -> ArrayD<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| StandardNormal.sample(&mut rng))
    };
    let mut store = ParamStore::new();
    let cfg = StackConfig { steps: 4, hidden: 8, alpha: 2.0, seed: 11 };
    let stack = conv_stack(&mut store, 6, 3, &cfg);
    randomize_params(&mut store, 18, 0.2);
    let y = randn(&[3, 6, 4, 4], 2);
    let ctxa = randn(&[3, 3, 4, 4], 3);

    let mut tape = Tape::no_grad();
    let bind = TapeBinding::new(&store);
    let u0 = tape.leaf(y.clone());
    let c = Some(tape.leaf(ctxa.clone()));
    let mut fwd = vec![y.clone()];
    let mut cur = u0;
    for layer in &stack.layers {
        let (next, _) = layer.forward_t(&mut tape, &bind, cur, c);
        fwd.push(tape.value(next).clone());
        cur = next;
    }
    // inverse from z
    let mut inv_cur = cur;
    for (i, layer) in stack.layers.iter().enumerate().rev() {
        inv_cur = layer.inverse_t(&mut tape, &bind, inv_cur, c);
        let expect = &fwd[i];
        let d = (tape.value(inv_cur) - expect).iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        let mx = tape.value(inv_cur).iter().fold(0.0f32, |m, &x| m.max(x.abs()));
        println!("after inverting layer {} ({}): diff {:.6e} maxabs {:.3e}", i, layer.kind(), d, mx);
    }
}
