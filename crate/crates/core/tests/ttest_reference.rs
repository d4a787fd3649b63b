use gase::trainer::paired_ttest;

// (actor, baseline, t, p) from scipy.stats.ttest_rel(actor, baseline, alternative="less")
const CASES: &[(&[f64], &[f64], f64, f64)] = &[
    (&[5.906341, 5.298354, 7.197232, 6.533019, 4.86926, 5.748192, 5.264966, 5.914148, 5.535216, 7.025189, 4.682225, 6.963282, 4.601192, 5.683707, 6.398195, 5.607757, 7.220141, 4.938381, 7.717777, 4.465663, 6.73588, 7.976685, 7.27796, 8.249419, 6.939208, 6.388204], &[5.637207, 5.916534, 7.414902, 6.575575, 4.446728, 6.108467, 5.201915, 5.783284, 5.988659, 7.08891, 4.260825, 6.868732, 4.781854, 5.682881, 6.198144, 5.809283, 7.776039, 4.473262, 7.652632, 4.509763, 6.768196, 7.461827, 7.139718, 7.686877, 6.163485, 6.86015], 0.4781018526556954, 0.681634000299636),
    (&[3.253499, 5.974388, 5.364172, 5.730811, 6.719629, 7.430126, 5.103267], &[4.08465, 6.641238, 5.963575, 6.402229, 6.835408, 7.655841, 5.064323], -3.4900213066964385, 0.006491510646809803),
    (&[7.226698, 8.185602, 4.239752, 6.010108, 5.511148, 5.783618, 7.20949, 8.464242, 5.776496, 6.233767, 4.719927, 6.716054, 5.552032, 6.994187, 4.801191, 5.748515, 5.531764, 7.593695, 7.307061, 4.557715, 5.596629, 6.971798, 4.820999, 6.26809, 4.744037], &[7.356472, 7.705319, 4.450893, 5.666442, 5.540912, 4.737416, 6.97811, 7.242188, 5.402459, 5.598327, 4.391648, 6.106632, 4.819792, 7.183034, 4.176782, 5.52128, 6.492998, 7.416474, 7.764671, 4.189019, 5.939509, 6.542332, 4.573037, 6.214576, 4.22789], 2.6621908323329575, 0.9931819271886358),
    (&[6.748548, 5.249173, 4.761189, 6.476244, 7.473866, 4.932594], &[6.573788, 5.119483, 4.774579, 6.562015, 7.409622, 5.006523], 0.7407171688931677, 0.7539190150515372),
    (&[7.433329, 3.936542, 6.973049, 4.437635, 6.007157, 4.274853, 6.587369, 6.058641, 6.931254, 7.398036, 4.384682, 5.11775, 5.684928, 6.92717, 7.274796, 5.791414, 5.916824, 4.356296, 4.775241, 6.060172, 7.143761, 4.622764, 7.366155, 6.414506, 7.760322, 6.795492, 3.870964, 6.008961, 6.549044, 7.523374, 6.864373, 4.283477, 5.641022, 7.616075, 5.360504, 5.103275, 6.753055], &[7.909432, 4.170486, 7.015084, 4.686464, 6.09584, 4.443971, 6.414158, 6.086952, 6.81074, 7.342552, 4.146459, 5.252142, 5.721175, 6.902181, 7.392337, 6.040734, 6.027052, 4.200307, 4.62301, 6.064238, 7.18856, 4.902297, 7.270927, 6.432909, 7.379805, 6.806718, 4.066065, 6.151142, 6.85062, 7.470491, 7.003443, 4.414731, 6.083967, 7.792997, 5.181074, 5.60691, 6.987878], -2.4425070151515618, 0.009812302588614501),
    (&[8.458867, 5.035262, 5.820058, 4.850948, 6.137175, 7.097363, 6.336888, 7.95365, 4.471467, 5.157858, 4.888258, 4.898032, 5.048771, 6.143773, 5.139364, 4.110712], &[7.593769, 5.341677, 6.393259, 4.902963, 6.693996, 6.871381, 6.625459, 7.74827, 4.272041, 5.870409, 4.375853, 5.590531, 4.815118, 6.258103, 4.59029, 4.063947], -0.24415235443925232, 0.40521042785451056),
    (&[4.919997, 6.723106, 6.128493, 5.945249, 6.06408, 6.98252, 5.326988, 6.083581, 5.403173, 5.841541, 4.281726, 5.585675, 7.500683, 6.380978, 4.102271, 5.182678, 7.558664, 7.782288, 7.626825, 4.298311, 7.396054, 6.461947, 6.340862, 4.5034, 5.974767, 6.558484, 4.349633, 5.909968], &[5.112248, 6.756061, 6.077632, 6.471867, 5.999928, 7.295279, 5.100587, 6.4281, 5.530139, 5.694158, 4.029031, 5.66786, 7.625372, 6.461354, 4.32736, 4.881518, 7.8006, 7.360017, 7.534948, 4.475958, 7.763548, 6.508946, 6.520019, 4.782699, 6.009591, 6.637044, 4.542961, 6.258149], -2.069493303369776, 0.024096617851630836),
    (&[3.599885, 6.071517], &[4.136041, 6.546111], -16.418407459146895, 0.019363458370686037),
    (&[7.595612, 7.705669, 7.416205, 5.546299, 3.877602, 6.461413, 7.399884, 4.986688, 4.953675, 6.970612], &[7.98036, 7.899554, 7.564308, 5.82012, 4.267417, 6.814283, 7.599626, 5.237466, 5.102153, 7.137994], -8.312392294458785, 8.139154761849902e-06),
    (&[7.393923, 5.365692, 4.768948, 6.225936, 3.716344, 3.753787, 5.341735, 4.057044, 7.133235, 5.766927, 4.799826, 5.444174, 5.829334, 5.861798, 6.323236], &[7.876357, 5.185826, 4.583358, 6.40697, 4.025897, 4.172451, 6.544338, 5.190556, 7.398653, 5.751179, 4.880007, 5.664622, 7.023089, 5.604596, 6.235278], -2.4772042025121688, 0.013306097823527164),
    (&[6.849045, 3.768503], &[6.417617, 4.203431], -0.004039909690704323, 0.4987140638019947),
    (&[6.563282, 5.311007, 6.593793, 6.392924, 7.053302, 6.495561, 4.630369, 3.7986, 5.491983, 6.708734], &[6.748821, 5.583273, 6.967075, 6.686468, 7.575775, 6.657816, 4.387158, 4.303795, 5.80206, 7.167102], -4.027049992631668, 0.0014930997821907734),
    (&[4.496319, 5.732465, 4.284681, 6.172703, 8.016423, 7.796583, 4.604903, 7.98012, 7.783996, 7.309828, 5.001023, 4.548346, 6.460174, 5.070774, 5.925123, 7.134629, 4.887775, 7.554901, 5.32559, 6.322508, 6.263911, 7.043442, 4.633055], &[4.244385, 5.669569, 4.462577, 6.008693, 7.643712, 7.316762, 4.660208, 7.733328, 7.42587, 7.079922, 4.912192, 4.431021, 6.341521, 4.629669, 5.876365, 7.047916, 4.460128, 7.457978, 4.991591, 6.204572, 6.190234, 6.806849, 4.637332], 5.102585235197222, 0.9999794449598679),
    (&[4.240095, 5.318206, 6.908183, 6.691551, 4.449487, 4.03348, 7.62074, 7.775386, 5.104592, 6.783597, 2.952211, 4.762734, 7.952339, 3.77277, 4.133821, 5.110314, 6.504638, 5.365748, 7.581158, 3.613154, 5.562594, 6.975423, 4.54012, 5.419337, 4.661842, 7.291387, 5.76841, 7.999575, 6.446838, 7.313004, 4.476957, 4.56586, 4.741551], &[4.843658, 5.437433, 7.098952, 6.812381, 5.114, 4.407774, 7.396368, 7.320056, 5.286191, 6.64474, 4.201279, 5.681213, 7.675735, 4.331818, 4.083894, 5.51196, 6.117713, 5.427732, 7.397203, 4.085533, 6.329657, 7.379382, 5.160231, 5.434075, 4.832209, 7.122541, 6.511457, 7.968344, 6.371958, 7.081838, 4.300884, 5.117076, 4.587185], -2.781396645389973, 0.0044986185184040465),
    (&[7.125548, 5.519131, 5.833838, 4.959894, 5.209017, 7.540599, 3.37333, 6.318562, 5.423811, 4.703175, 7.092542, 6.583626, 7.681878, 4.629184, 5.455911, 4.08754, 5.719216, 4.411136, 4.228593, 7.467434, 6.128024, 5.811111, 6.18967, 4.779906, 5.67104, 6.598782, 6.661835, 7.352717, 4.515872, 3.935382, 6.250429], &[7.328908, 5.446971, 5.795503, 5.495916, 5.252526, 7.689802, 4.237324, 6.503622, 5.407179, 4.347391, 6.856187, 6.443216, 7.870062, 4.556596, 4.611558, 4.571728, 5.669659, 4.529282, 4.118607, 7.916794, 6.165068, 6.700852, 6.220138, 5.435088, 5.628411, 6.725406, 6.592096, 7.436813, 4.719503, 4.106381, 5.970721], -1.5902911017068067, 0.061126767987160435),
    (&[4.644448, 4.121468, 4.205855, 3.638846, 4.422082, 5.505519, 5.922572, 5.996008, 6.8659, 4.30049, 6.698855, 6.469923, 5.179046, 4.897723, 5.302825, 7.501342, 7.759912], &[4.070209, 4.228009, 4.13974, 4.016165, 4.078116, 5.6483, 5.41913, 5.275455, 7.355209, 4.653676, 7.015902, 5.806382, 5.220193, 4.936582, 4.385046, 7.463145, 7.413298], 1.30205795090553, 0.8943349150998016),
    (&[5.842827, 5.415696, 7.718299, 5.431669, 5.84364, 7.103845], &[5.339795, 4.964579, 7.936417, 5.192643, 6.811929, 7.769124], -0.4396921945858516, 0.3392573635975292),
    (&[7.123307, 7.439839, 6.191239, 6.533763, 5.125519, 4.690986, 3.831941, 6.964397, 6.495921, 7.564406, 4.262949, 6.120188, 4.651235, 6.270881, 5.619825, 3.923706, 5.567911, 4.224273, 4.603118, 7.923293, 5.836964, 4.168668, 6.245567, 5.55737, 6.35197, 5.872278, 7.562788], &[7.079366, 7.690612, 6.635105, 6.496247, 5.818105, 4.409785, 4.4226, 7.033007, 7.020471, 7.835736, 4.52894, 6.472918, 4.743648, 6.425547, 5.760456, 4.217805, 5.506974, 4.867043, 4.453904, 7.92989, 6.097313, 4.331027, 6.82479, 5.770882, 6.204189, 6.185955, 7.65486], -4.283305431027069, 0.00011130220972301333),
    (&[4.285147, 6.566229, 4.997513, 5.99112, 5.743193, 8.393894, 6.080644, 4.65229, 7.102344, 5.741073, 5.174579, 8.202713, 6.786565, 6.779712, 8.18785, 6.441412, 7.705249, 5.972154, 8.650615, 4.946633, 6.320129, 7.824738, 5.583044, 6.821583, 4.95717, 6.116109, 5.48895], &[4.182786, 6.064585, 4.96066, 6.61792, 5.659395, 7.607418, 6.396184, 5.134809, 6.544021, 5.815099, 4.696919, 7.584396, 6.232549, 6.502383, 7.529343, 6.344105, 7.084718, 6.154494, 7.917098, 4.174448, 5.089267, 7.042812, 6.201239, 6.201414, 5.968795, 5.424381, 5.454307], 2.4754430801358556, 0.9899279080757805),
    (&[4.054522, 4.396983, 5.562631, 5.575641, 5.481343, 4.231107, 6.240842, 6.836676, 5.203989, 6.901108, 6.548668, 6.106193, 5.434793, 5.704641, 3.565504, 5.198888, 6.533909, 4.597216, 5.698935, 3.651364, 4.1319, 6.882638, 5.965312, 5.800213, 6.406661, 5.72646, 5.041427, 7.425511, 5.711747, 7.504821, 5.70042, 5.461097, 7.139033, 6.324477, 6.743702], &[4.186115, 4.797803, 6.511058, 6.268213, 6.13745, 4.528332, 6.37328, 6.625578, 4.939377, 6.833147, 6.504859, 5.899459, 5.626928, 5.614284, 4.39649, 5.089929, 6.485734, 5.168395, 5.991084, 4.609816, 4.143748, 6.79341, 6.281778, 6.37867, 6.372008, 5.711955, 5.510953, 7.644235, 6.436352, 6.956878, 5.803822, 5.112788, 7.282418, 6.285839, 7.149309], -3.1285377468695943, 0.0017964559967133913),
];

#[test]
fn matches_reference_statistics() {
    for (i, &(actor, baseline, t, p)) in CASES.iter().enumerate() {
        let r = paired_ttest(actor, baseline).unwrap();
        assert_eq!(r.df, actor.len() - 1);
        assert!((r.t - t).abs() <= 1e-8 * t.abs().max(1.0), "case {i}: t {} vs {t}", r.t);
        assert!((r.p - p).abs() <= 1e-6, "case {i}: p {} vs {p}", r.p);
    }
}
