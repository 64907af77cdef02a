use ach_bench::{ach_layer, input};
use ach_core::scheduler::{checksum, reference, run_dispatch, DispatchPlan, Strategy};
use ach_core::{Mode, Tape};

#[test]
fn bench_inputs_dispatch_like_the_reference() {
    let z = input(2, 16, 7, 1);
    let want = checksum(&reference(&z).unwrap());
    for strategy in Strategy::ALL {
        let plan = DispatchPlan::new(strategy, 3, 16).unwrap();
        assert_eq!(checksum(&run_dispatch(&z, &plan).unwrap()), want, "{strategy}");
    }
}

#[test]
fn bench_layer_runs_a_training_step() {
    let (mut layer, mut params) = ach_layer(12, 4, 2).unwrap();
    let mut tape = Tape::new();
    let xv = tape.leaf(input(3, 12, 5, 2));
    let out = layer.forward(&mut tape, &params, xv, Mode::Train).unwrap();
    assert_eq!(tape.value(out.y).shape(), &[3, 18, 5, 5]);
    let loss = tape.mean(out.y).unwrap();
    tape.backward(loss, &mut params).unwrap();
}
