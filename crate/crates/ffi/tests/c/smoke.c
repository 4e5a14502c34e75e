#include <stdio.h>
#include <stdlib.h>
#include "rflux_ffi.h"

#define CHECK(call)                                                   \
    do {                                                              \
        RfluxStatus st_ = (call);                                     \
        if (st_ != RFLUX_STATUS_OK) {                                 \
            char msg_[256];                                           \
            rflux_last_error_message(msg_, sizeof msg_);              \
            fprintf(stderr, "%s -> %d: %s\n", #call, (int)st_, msg_); \
            return 1;                                                 \
        }                                                             \
    } while (0)

int main(void) {
    RfluxModel *model = NULL;
    uint64_t count = 0, flux = 0;
    CHECK(rflux_model_new("toy", RFLUX_INIT_DENSE, 0, &model));
    CHECK(rflux_model_param_count(model, &count));
    CHECK(rflux_preset_param_count("flux-shape", &flux));

    RfluxSampleParams p = rflux_sample_params_default();
    p.prompt = "x";
    p.seed = 1;
    size_t need = 0;
    if (rflux_sample_rgb(model, &p, NULL, 0, &need) != RFLUX_STATUS_BUFFER_TOO_SMALL) return 2;
    uint8_t *rgb = malloc(need);
    CHECK(rflux_sample_rgb(model, &p, rgb, need, &need));
    unsigned long sum = 0;
    for (size_t i = 0; i < need; i++) sum += rgb[i];
    free(rgb);
    rflux_model_free(model);

    printf("version=%s params=%llu flux=%llu bytes=%zu sum=%lu\n", rflux_version(),
           (unsigned long long)count, (unsigned long long)flux, need, sum);
    return 0;
}
