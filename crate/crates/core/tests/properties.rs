use num_complex::Complex64;
use proptest::prelude::*;

use snn_dfe::channel::{gray_demap, gray_map, bits_to_classes, square_law, Domain, PamAlphabet, SignalBuffer};
use snn_dfe::dse::{pareto_front, TrialConfig, TrialResult, TrialStatus};
use snn_dfe::equalizer::{encode_window, input_size, mac_count, DecisionBuffer, EncoderConfig, EncoderScheme};
use snn_dfe::fxp::{Accumulator, SatCounters};
use snn_dfe::harness::{BerCurve, BerPoint};
use snn_dfe::tensor::quantize_value;
use snn_dfe::train::{fake_quantize, fake_quantize_with_step, ScaleMode};

fn trial(id: usize, mac: u64, errors: u64) -> TrialResult {
    TrialResult {
        config: TrialConfig { n_tap: 3, n_hidden: id + 1, time_steps: 1, bits: None },
        mac,
        ber: Some(BerCurve { points: vec![BerPoint::new(17.0, errors, 1000)] }),
        seed: 0,
        wall_time_s: 0.0,
        status: TrialStatus::Ok,
        error: None,
    }
}

proptest! {
    #[test]
    fn gray_round_trip(m in 1u32..=4, groups in 0usize..64, seed in any::<u64>()) {
        let a = PamAlphabet::sqrt_levels(m);
        let bits: Vec<u8> = (0..groups * m as usize).map(|k| ((seed >> (k % 64)) & 1) as u8).collect();
        let classes = bits_to_classes(&bits, &a).unwrap();
        prop_assert_eq!(gray_demap(&classes, &a), bits.clone());
        prop_assert_eq!(gray_map(&bits, &a).unwrap().len(), groups);
    }

    #[test]
    fn adjacent_levels_differ_in_one_bit(m in 1u32..=4) {
        let a = PamAlphabet::sqrt_levels(m);
        for k in 1..a.len() {
            prop_assert_eq!(a.bit_distance(k - 1, k), 1);
        }
    }

    #[test]
    fn fake_quantize_is_idempotent(values in prop::collection::vec(-10.0f64..10.0, 1..64), bits in 2u32..=12) {
        for mode in [ScaleMode::PowerOfTwo, ScaleMode::MaxAbs] {
            let once = fake_quantize(&values, bits, mode);
            let twice = fake_quantize_with_step(&once.values, bits, once.step);
            prop_assert_eq!(&twice.values, &once.values);
        }
    }

    #[test]
    fn power_of_two_scale_never_clips(values in prop::collection::vec(-10.0f64..10.0, 1..64), bits in 2u32..=12) {
        let q = fake_quantize(&values, bits, ScaleMode::PowerOfTwo);
        prop_assert_eq!(q.step.log2().fract(), 0.0);
        prop_assert!(q.pass.iter().all(|&p| p));
    }

    #[test]
    fn quantize_error_is_at_most_half_step(x in -100.0f64..100.0, e in -8i32..4, bits in 2u32..=16) {
        let step = (e as f64).exp2();
        let (q, in_range) = quantize_value(x, step, bits);
        if in_range {
            prop_assert!((q - x).abs() <= step / 2.0);
        }
        let lim = (1i64 << (bits - 1)) as f64 * step;
        prop_assert!(q >= -lim && q < lim);
    }

    #[test]
    fn right_shift_is_floor_division(x in -1_000_000i64..1_000_000, k in 1i32..20) {
        let acc = Accumulator::new(32);
        let mut sat = SatCounters::default();
        prop_assert_eq!(acc.shift(x, -k, &mut sat), x.div_euclid(1 << k));
        prop_assert_eq!(acc.round_shift(x, -k, &mut sat), (x + (1 << (k - 1))).div_euclid(1 << k));
    }

    #[test]
    fn mac_count_grows_with_each_dimension(h in 1usize..80, t in 1usize..10, tap in 0usize..20, m in 1u32..=3) {
        let n = input_size(2 * tap + 1, m).unwrap();
        let base = mac_count(h, n, t, m);
        prop_assert!(mac_count(h + 1, n, t, m) > base);
        prop_assert!(mac_count(h, n, t + 1, m) > base);
        prop_assert!(mac_count(h, input_size(2 * tap + 3, m).unwrap(), t, m) > base);
    }

    #[test]
    fn encoded_window_is_ternary(
        half in 0usize..10,
        samples in prop::collection::vec(-1.0f64..5.0, 11),
        past in prop::collection::vec(0usize..4, 10),
        one_hot in any::<bool>(),
    ) {
        let scheme = if one_hot { EncoderScheme::OneHot } else { EncoderScheme::Binary };
        let enc = EncoderConfig { scheme, lo: 0.0, hi: 4.0 };
        let mut out = Vec::new();
        encode_window(&samples[..half + 1], &DecisionBuffer::from_slice(&past[..half]), &enc, 4, &mut out).unwrap();
        prop_assert_eq!(out.len(), input_size(2 * half + 1, 2).unwrap());
        prop_assert!(out.iter().all(|x| (-1..=1).contains(x)));
    }

    #[test]
    fn square_law_is_nonnegative(re in prop::collection::vec(-5.0f64..5.0, 1..64), im in -5.0f64..5.0) {
        let real = square_law(&SignalBuffer::real(re.clone(), 1.0, Domain::Oversampled));
        prop_assert!(real.as_real().unwrap().iter().all(|&y| y >= 0.0));
        let z: Vec<Complex64> = re.iter().map(|&r| Complex64::new(r, im)).collect();
        let cplx = square_law(&SignalBuffer::complex(z, 1.0, Domain::Oversampled));
        prop_assert!(cplx.as_real().unwrap().iter().all(|&y| y >= 0.0));
    }

    #[test]
    fn pareto_front_is_non_dominated_and_order_free(points in prop::collection::vec((1u64..20, 0u64..20), 1..40), rot in 0usize..40) {
        let trials: Vec<TrialResult> = points.iter().enumerate().map(|(k, &(m, e))| trial(k, m, e)).collect();
        let front = pareto_front(&trials, 17.0).unwrap();
        prop_assert!(!front.is_empty());
        let ber = |t: &TrialResult| t.ber_at(17.0).unwrap();
        for f in &front {
            prop_assert!(!trials.iter().any(|u| u.mac <= f.mac && ber(u) <= ber(f) && (u.mac < f.mac || ber(u) < ber(f))));
        }
        let mut shuffled = trials.clone();
        shuffled.rotate_left(rot % trials.len());
        let mut a: Vec<_> = front.iter().map(|t| t.config.n_hidden).collect();
        let mut b: Vec<_> = pareto_front(&shuffled, 17.0).unwrap().iter().map(|t| t.config.n_hidden).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }
}
