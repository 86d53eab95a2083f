#![no_main]

use feeder_opf::network::parse_feeder;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = parse_feeder(text) {
        // Accepted feeders survive a write/read cycle unchanged.
        let again = parse_feeder(&model.to_json()).expect("re-parse");
        assert_eq!(again.to_document(), model.to_document());
        let _ = model.bfs_order();
        let _ = model.is_line_network();
    }
});
