#![no_main]

use layoutforge::exchange::ExchangeTensor;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = ExchangeTensor::decode(data) {
        // whatever decodes must re-encode to the same bytes
        assert_eq!(t.encode(), data);
        let _ = t.to_attention();
        let _ = t.to_latent();
        let _ = t.to_mask();
    }
});
