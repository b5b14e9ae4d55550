//! Published district forecasts for 2026 and 2030, kept as fixtures for
//! output-format conformance and plausibility ranges.

/// The 30 districts, in table order.
pub const DISTRICTS: [&str; 30] = [
    "Angul",
    "Balangir",
    "Baleshwar",
    "Bargarh",
    "Baudh",
    "Bhadrak",
    "Cuttack",
    "Debagarh",
    "Dhenkanal",
    "Gajapati",
    "Ganjam",
    "Jagatsinghpur",
    "Jajapur",
    "Jharsuguda",
    "Kalahandi",
    "Kendrapara",
    "Kendujhar",
    "Khandamal",
    "Khordha",
    "Koraput",
    "Malkangiri",
    "Mayurbhanj",
    "Nabarangapur",
    "Nayagarh",
    "Nuapada",
    "Puri",
    "Rayagada",
    "Sambalpur",
    "Sonapur",
    "Sundargarh",
];

/// Rows follow [`DISTRICTS`]; columns follow [`crate::data::INDICATORS`].
pub const FORECAST_2026: [[f64; 6]; 30] = [
    [0.865, 0.382, 0.556, 0.846, 0.994, 0.297], // Angul
    [0.858, 0.470, 0.617, 0.805, 0.997, 0.231], // Balangir
    [0.851, 0.401, 0.500, 0.652, 0.993, 0.293], // Baleshwar
    [0.813, 0.467, 0.579, 0.799, 0.995, 0.251], // Bargarh
    [0.891, 0.329, 0.606, 0.755, 0.997, 0.226], // Baudh
    [0.852, 0.248, 0.475, 0.640, 0.995, 0.306], // Bhadrak
    [0.853, 0.608, 0.727, 0.911, 0.995, 0.340], // Cuttack
    [0.844, 0.329, 0.460, 0.661, 0.992, 0.259], // Debagarh
    [0.786, 0.346, 0.571, 0.798, 0.993, 0.283], // Dhenkanal
    [0.810, 0.567, 0.601, 0.851, 0.994, 0.198], // Gajapati
    [0.890, 0.771, 0.844, 0.956, 0.998, 0.293], // Ganjam
    [0.863, 0.434, 0.597, 0.891, 0.997, 0.335], // Jagatsinghpur
    [0.807, 0.276, 0.525, 0.821, 0.994, 0.330], // Jajapur
    [0.845, 0.475, 0.672, 0.830, 0.992, 0.343], // Jharsuguda
    [0.910, 0.358, 0.604, 0.728, 0.994, 0.258], // Kalahandi
    [0.844, 0.357, 0.547, 0.787, 0.996, 0.318], // Kendrapara
    [0.737, 0.391, 0.504, 0.652, 0.982, 0.264], // Kendujhar
    [0.901, 0.304, 0.556, 0.788, 0.996, 0.247], // Khandamal
    [0.909, 0.702, 0.850, 0.940, 0.997, 0.414], // Khordha
    [0.717, 0.438, 0.551, 0.744, 0.988, 0.198], // Koraput
    [0.860, 0.347, 0.490, 0.684, 0.997, 0.172], // Malkangiri
    [0.771, 0.335, 0.384, 0.484, 0.982, 0.245], // Mayurbhanj
    [0.827, 0.365, 0.460, 0.644, 0.992, 0.186], // Nabarangapur
    [0.908, 0.536, 0.749, 0.911, 0.999, 0.270], // Nayagarh
    [0.830, 0.310, 0.505, 0.741, 0.995, 0.211], // Nuapada
    [0.916, 0.506, 0.696, 0.922, 0.998, 0.348], // Puri
    [0.856, 0.610, 0.626, 0.813, 0.995, 0.192], // Rayagada
    [0.836, 0.573, 0.660, 0.778, 0.991, 0.297], // Sambalpur
    [0.885, 0.373, 0.682, 0.829, 0.998, 0.277], // Sonapur
    [0.856, 0.529, 0.661, 0.790, 0.991, 0.329], // Sundargarh
];

/// Rows follow [`DISTRICTS`]; columns follow [`crate::data::INDICATORS`].
pub const FORECAST_2030: [[f64; 6]; 30] = [
    [0.945, 0.524, 0.748, 0.923, 0.998, 0.362], // Angul
    [0.949, 0.615, 0.798, 0.909, 0.999, 0.288], // Balangir
    [0.931, 0.521, 0.680, 0.792, 0.998, 0.346], // Baleshwar
    [0.925, 0.603, 0.762, 0.901, 0.999, 0.306], // Bargarh
    [0.962, 0.483, 0.800, 0.884, 0.999, 0.289], // Baudh
    [0.938, 0.360, 0.671, 0.792, 0.999, 0.365], // Bhadrak
    [0.936, 0.718, 0.853, 0.954, 0.999, 0.398], // Cuttack
    [0.938, 0.464, 0.670, 0.811, 0.998, 0.317], // Debagarh
    [0.905, 0.479, 0.751, 0.892, 0.998, 0.343], // Dhenkanal
    [0.924, 0.702, 0.785, 0.929, 0.999, 0.248], // Gajapati
    [0.958, 0.848, 0.925, 0.980, 1.000, 0.348], // Ganjam
    [0.944, 0.577, 0.780, 0.946, 0.999, 0.405], // Jagatsinghpur
    [0.914, 0.398, 0.713, 0.906, 0.998, 0.395], // Jajapur
    [0.931, 0.602, 0.814, 0.910, 0.998, 0.405], // Jharsuguda
    [0.969, 0.515, 0.801, 0.864, 0.999, 0.323], // Kalahandi
    [0.935, 0.493, 0.736, 0.889, 0.999, 0.381], // Kendrapara
    [0.874, 0.512, 0.681, 0.794, 0.995, 0.315], // Kendujhar
    [0.967, 0.460, 0.776, 0.900, 0.999, 0.310], // Khandamal
    [0.962, 0.787, 0.922, 0.970, 0.999, 0.469], // Khordha
    [0.875, 0.573, 0.736, 0.866, 0.997, 0.245], // Koraput
    [0.953, 0.488, 0.717, 0.834, 0.999, 0.222], // Malkangiri
    [0.903, 0.413, 0.557, 0.621, 0.994, 0.296], // Mayurbhanj
    [0.939, 0.477, 0.670, 0.787, 0.998, 0.237], // Nabarangapur
    [0.968, 0.684, 0.884, 0.961, 1.000, 0.337], // Nayagarh
    [0.935, 0.450, 0.719, 0.870, 0.999, 0.265], // Nuapada
    [0.970, 0.655, 0.851, 0.965, 1.000, 0.422], // Puri
    [0.947, 0.735, 0.804, 0.911, 0.999, 0.239], // Rayagada
    [0.927, 0.684, 0.805, 0.882, 0.998, 0.350], // Sambalpur
    [0.959, 0.525, 0.842, 0.921, 1.000, 0.345], // Sonapur
    [0.936, 0.649, 0.807, 0.889, 0.997, 0.387], // Sundargarh
];
/// One published forecast table.
#[derive(Clone, Copy, Debug)]
pub struct ReferenceTable {
    pub year: u32,
    pub rows: &'static [[f64; 6]; 30],
}

impl ReferenceTable {
    /// Value for `district` and `indicator` (a name from
    /// [`crate::data::INDICATORS`]).
    pub fn get(&self, district: &str, indicator: &str) -> Option<f64> {
        let d = DISTRICTS.iter().position(|&n| n == district)?;
        let k = crate::data::INDICATORS.iter().position(|&n| n == indicator)?;
        Some(self.rows[d][k])
    }
}

pub fn reference_tables() -> [ReferenceTable; 2] {
    [
        ReferenceTable {
            year: 2026,
            rows: &FORECAST_2026,
        },
        ReferenceTable {
            year: 2030,
            rows: &FORECAST_2030,
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spot_values() {
        let [t26, t30] = reference_tables();
        assert_eq!(t26.get("Angul", "toilet"), Some(0.865));
        assert_eq!(t30.get("Ganjam", "electricity"), Some(1.000));
        assert_eq!(t30.get("Khordha", "education_secondary"), Some(0.469));
        assert_eq!(t30.get("Nowhere", "toilet"), None);
    }

    #[test]
    fn values_are_proportions_and_infrastructure_is_monotone() {
        let [t26, t30] = reference_tables();
        for t in [t26, t30] {
            assert!(t.rows.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }
        // toilet, lpg, pucca_house, electricity
        for d in 0..30 {
            for k in [0, 2, 3, 4] {
                assert!(
                    t30.rows[d][k] >= t26.rows[d][k] - 1e-9,
                    "{} column {k}",
                    DISTRICTS[d]
                );
            }
        }
    }
}
