#![no_main]

use himec::scenario::Scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(sc) = Scenario::parse(text) {
        let _ = sc.system.validate();
        let _ = sc.generator.problems();
    }
});
