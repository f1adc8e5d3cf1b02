use ndarray::Array2;
use rand::Rng as _;
use trajstitch::nn::{gradcheck, Activation, MlpSpec, ParamSet};
use trajstitch::seed::rng_from_seed;

#[test]
fn twenty_random_mlps_match_central_differences() {
    let mut rng = rng_from_seed(2024);
    for case in 0..20u64 {
        let input = rng.random_range(1..6);
        let hidden: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(1..9)).collect();
        let output = rng.random_range(1..5);
        let act = if case % 2 == 0 { Activation::Gelu } else { Activation::Relu };
        let spec = MlpSpec::with_hidden(input, &hidden, output, act).unwrap();
        let mut params = ParamSet::kaiming(&spec, case);
        for v in params.values.iter_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let batch_size = rng.random_range(1..5);
        let batch = Array2::from_shape_fn((batch_size, input), |_| rng.random_range(-2.0..2.0));
        let upstream = Array2::from_shape_fn((batch_size, output), |_| rng.random_range(-1.0..1.0));
        let report = gradcheck(&spec, &params.values, batch.view(), upstream.view(), 1e-6, 1e-4, 1e-7).unwrap();
        assert_eq!(report.n_checked, spec.num_params());
        assert!(
            report.passed(),
            "case {case}: {input} -> {hidden:?} -> {output} ({act:?}): {report:?}"
        );
    }
}
