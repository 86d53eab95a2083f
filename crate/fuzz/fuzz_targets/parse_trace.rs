#![no_main]

use feeder_opf::network::{generate_line_feeder, GeneratorConfig};
use feeder_opf::trace::parse_trace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = parse_trace(text) {
        let model = generate_line_feeder(3, &GeneratorConfig::default()).expect("feeder");
        let _ = table.snapshots(&model);
    }
});
