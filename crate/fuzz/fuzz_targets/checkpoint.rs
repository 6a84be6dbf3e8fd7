#![no_main]

use libfuzzer_sys::fuzz_target;
use std::io::BufRead;

fuzz_target!(|data: &[u8]| {
    let mut lines = std::io::BufReader::new(data).lines();
    if let Ok(net) = latsolve::nn::DenseNet::read_from(&mut lines) {
        // loaded networks are usable and re-serialize losslessly
        let x = vec![0.5; net.input_size()];
        let _ = net.forward(&x).unwrap();
        let mut buf = Vec::new();
        net.write_into(&mut buf).unwrap();
        let mut lines2 = std::io::BufReader::new(buf.as_slice()).lines();
        let rt = latsolve::nn::DenseNet::read_from(&mut lines2).unwrap();
        assert_eq!(rt.layer_sizes(), net.layer_sizes());
    }
});
