//! Measured rates on Gaussian activations.

use std::time::Instant;

use sft_core::compression::{
    compress, compression_ratio, decompress, measure_rates, ActivationTensor, CompressionConfig, RatePredictor,
};

#[test]
fn full_size_tensor_rate() {
    let t = ActivationTensor::gaussian(12608, 768, 7);
    let start = Instant::now();
    let blob = compress(&t, &CompressionConfig::new(0.2, 8), 1).unwrap();
    let elapsed = start.elapsed();
    let beta = compression_ratio(&blob, &t, 4);
    let nnz = blob.header.nnz as f64;
    let naive_bits = 64.0 * nnz;
    println!("1/beta = {:.2}, vs naive {:.2}x, {:?}", 1.0 / beta, naive_bits / blob.bit_len() as f64, elapsed);
    assert!(1.0 / beta >= 15.0);
    assert!(naive_bits / blob.bit_len() as f64 >= 1.4);
    assert_eq!(decompress(&blob).unwrap().len(), t.len());
}

#[test]
fn rate_is_monotone_in_keep_rate() {
    let t = ActivationTensor::gaussian(256, 128, 3);
    let rhos: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    for e in [2u16, 8, 32] {
        let samples = measure_rates(&t, &rhos, &[e], 4, 0).unwrap();
        for w in samples.windows(2) {
            assert!(w[1].beta >= w[0].beta, "E={e}: {:?}", w);
        }
    }
}

#[test]
fn predictor_tracks_fresh_measurements() {
    let t = ActivationTensor::gaussian(512, 128, 5);
    let rhos: Vec<f64> = (1..=20).map(|i| i as f64 * 0.05).collect();
    let levels = [2u16, 4, 8, 16, 32];
    let predictor = RatePredictor::calibrate(&measure_rates(&t, &rhos, &levels, 4, 0).unwrap()).unwrap();
    let fresh = ActivationTensor::gaussian(512, 128, 6);
    for (rho, e) in [(0.125, 4u16), (0.33, 8), (0.61, 16), (0.875, 32), (0.2, 2)] {
        let blob = compress(&fresh, &CompressionConfig::new(rho, e), 9).unwrap();
        let measured = compression_ratio(&blob, &fresh, 4);
        let predicted = predictor.predict(rho, e as f64);
        let err = (predicted - measured).abs() / measured;
        assert!(err < 0.05, "rho={rho} E={e}: predicted {predicted}, measured {measured}");
    }
}
