/* Train a small model on synthetic data, then forecast one window.
 *
 *   cargo build --release -p msdftvnet-ffi
 *   cc -Icrates/ffi/include crates/ffi/examples/c/forecast.c \
 *      -Ltarget/release -l:libmsdftvnet_ffi.a -lm -lpthread -ldl -o forecast
 */
#include <math.h>
#include <stdio.h>

#include "msdftvnet.h"

static const double PI = 3.14159265358979323846;

int main(void) {
    MsdTrainConfig cfg;
    msd_train_config_default(&cfg);
    cfg.lookback = 32;
    cfg.horizon = 8;
    cfg.embed_dim = 8;
    cfg.epochs = 5;
    cfg.batch_size = 16;

    MsdForecaster *model = NULL;
    MsdStatus s = msd_forecaster_train("synthetic:periods=16,8;T=300;C=2;seed=1", &cfg, &model);
    if (s != MSD_STATUS_OK) {
        fprintf(stderr, "train failed (%d): %s\n", (int)s, msd_last_error());
        return 1;
    }

    double window[32 * 2];
    for (int t = 0; t < 32; t++) {
        window[2 * t] = sin(2.0 * PI * t / 16.0);
        window[2 * t + 1] = cos(2.0 * PI * t / 8.0);
    }
    double out[8 * 2];
    s = msd_forecaster_predict(model, window, 64, out, 16);
    if (s != MSD_STATUS_OK) {
        fprintf(stderr, "predict failed: %s\n", msd_last_error());
        msd_forecaster_free(model);
        return 1;
    }
    for (int t = 0; t < 8; t++) {
        printf("%d,%.6f,%.6f\n", t + 1, out[2 * t], out[2 * t + 1]);
    }
    msd_forecaster_free(model);
    return 0;
}
