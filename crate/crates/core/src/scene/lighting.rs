use super::WeatherPreset;
use crate::render::LightingParams;

/// Lighting parameters for each weather preset. The sun azimuth is shared so
/// that each situation's sun relation holds under every preset.
pub fn lighting_from_preset(preset: WeatherPreset) -> LightingParams {
    let (sun_elevation_deg, direct_intensity, ambient_intensity, desaturation) = match preset {
        WeatherPreset::ClearNoon => (65.0, 0.75, 0.35, 0.0),
        WeatherPreset::CloudyNoon => (65.0, 0.45, 0.45, 0.15),
        WeatherPreset::ClearSunset => (8.0, 0.6, 0.25, 0.0),
        WeatherPreset::CloudySunset => (12.0, 0.35, 0.3, 0.2),
        WeatherPreset::SoftRainNoon => (65.0, 0.25, 0.45, 0.35),
    };
    LightingParams {
        sun_elevation_deg,
        sun_azimuth_deg: 0.0,
        direct_intensity,
        ambient_intensity,
        desaturation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clear_noon_is_brightest() {
        let best = lighting_from_preset(WeatherPreset::ClearNoon).direct_intensity;
        for w in WeatherPreset::ALL {
            assert!(lighting_from_preset(w).direct_intensity <= best);
        }
    }

    #[test]
    fn sunsets_are_low() {
        for w in [WeatherPreset::CloudySunset, WeatherPreset::ClearSunset] {
            assert!(lighting_from_preset(w).sun_elevation_deg <= 15.0);
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        for w in WeatherPreset::ALL {
            let a = lighting_from_preset(w);
            assert_eq!(a, lighting_from_preset(w));
            for v in [a.direct_intensity, a.ambient_intensity, a.desaturation] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
