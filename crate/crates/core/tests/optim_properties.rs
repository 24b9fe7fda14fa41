use mtunet_core::optim::{Checkpoint, Rlrp, RlrpAction, RlrpConfig};
use mtunet_core::Tensor;
use proptest::prelude::*;

fn replay(losses: &[f64], patience: usize) -> (Vec<RlrpAction>, Rlrp<f64>) {
    let mut rlrp = Rlrp::new(
        RlrpConfig {
            patience,
            ..RlrpConfig::default()
        },
        1e-3,
    );
    let actions = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let epoch = i + 1;
            rlrp.observe(epoch, l, || Checkpoint {
                model: vec![Tensor::scalar(epoch as f64)],
                sigmas: vec![],
                epoch,
                val_loss: l,
            })
        })
        .collect();
    (actions, rlrp)
}

proptest! {
    #[test]
    fn scheduler_is_a_function_of_the_sequence(
        losses in prop::collection::vec(0.0f64..2.0, 1..80),
        patience in 1usize..6,
    ) {
        let (a, ra) = replay(&losses, patience);
        let (b, rb) = replay(&losses, patience);
        prop_assert_eq!(a, b);
        prop_assert_eq!(ra.best(), rb.best());
        prop_assert_eq!(ra.bad_epochs(), rb.bad_epochs());
        prop_assert_eq!(ra.lr(), rb.lr());
    }

    #[test]
    fn rollback_target_is_the_best_epoch_so_far(
        losses in prop::collection::vec(0.0f64..2.0, 1..80),
        patience in 1usize..6,
    ) {
        let mut rlrp = Rlrp::new(RlrpConfig { patience, ..RlrpConfig::default() }, 1e-3);
        let mut best: Option<(usize, f64)> = None;
        let mut reductions = 0i32;
        for (i, &l) in losses.iter().enumerate() {
            let epoch = i + 1;
            if best.is_none_or(|(_, b)| l < b) {
                best = Some((epoch, l));
            }
            let action = rlrp.observe(epoch, l, || Checkpoint {
                model: vec![Tensor::scalar(epoch as f64)],
                sigmas: vec![],
                epoch,
                val_loss: l,
            });
            let ck = rlrp.best_checkpoint().unwrap();
            prop_assert_eq!(ck.epoch, best.unwrap().0);
            prop_assert_eq!(ck.model[0].item(), best.unwrap().0 as f64);
            if let RlrpAction::ReduceAndRollback { lr_after, .. } = action {
                reductions += 1;
                let expected = (1e-3 * 0.1f64.powi(reductions)).max(1e-7);
                prop_assert!((lr_after - expected).abs() <= 1e-12 * expected);
            }
        }
    }
}
